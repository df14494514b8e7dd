//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function is a thin wrapper over a plain Rust function of
//! the same name with a `_rs` suffix; those are what the native tests call.
//! Results cross the boundary as flat `f64` arrays.

use std::collections::BTreeMap;

use prefrobust::dro::{regularizer_coefficient, AmbiguitySet, Direction};
use prefrobust::loss::{dro_loss, label_losses};
use prefrobust::rmab::features::all_features;
use prefrobust::rmab::whittle::{q_gap, whittle_index};
use prefrobust::rmab::{parse_reward, ArmModel, WhittleParams};
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// `[q, toward_one, toward_zero]` triples on a q grid of `n + 1` points.
pub fn coefficient_curve_rs(rho: f64, n: usize) -> Result<Vec<f64>, String> {
    if n == 0 {
        return Err("grid needs at least one interval".into());
    }
    let mut out = Vec::with_capacity(3 * (n + 1));
    for i in 0..=n {
        let q = i as f64 / n as f64;
        out.push(q);
        for d in [Direction::TowardOne, Direction::TowardZero] {
            out.push(regularizer_coefficient(q, rho, d).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn coefficient_curve(rho: f64, n: usize) -> Result<Vec<f64>, JsError> {
    coefficient_curve_rs(rho, n).map_err(js)
}

/// Worst case for one sample with margin `delta`:
/// `[p_hat, l1, lm1, dpo, dro, reg_term]`.
pub fn worst_case_rs(q: f64, rho: f64, delta: f64, beta: f64) -> Result<Vec<f64>, String> {
    let (l1, lm1) = label_losses(delta, beta);
    let amb = AmbiguitySet::chi2(rho).map_err(|e| e.to_string())?;
    let b = dro_loss(l1, lm1, q, &amb).map_err(|e| e.to_string())?;
    Ok(vec![b.p_hat, b.l1, b.lm1, b.dpo, b.dro, b.reg_term])
}

#[wasm_bindgen]
pub fn worst_case(q: f64, rho: f64, delta: f64, beta: f64) -> Result<Vec<f64>, JsError> {
    worst_case_rs(q, rho, delta, beta).map_err(js)
}

/// One arm built from engagement probabilities `p[s][a]` (row-major
/// `[p00, p01, p10, p11]`) and a comma-separated list of features it has.
fn arm(engage: &[f64], features: &str) -> Result<ArmModel, String> {
    let [p00, p01, p10, p11] = engage else {
        return Err(format!("expected 4 engagement probabilities, got {}", engage.len()));
    };
    let known = all_features();
    let mut map: BTreeMap<String, u8> = known.iter().map(|f| (f.to_string(), 0)).collect();
    for f in features.split(',').map(str::trim).filter(|f| !f.is_empty()) {
        match map.get_mut(f) {
            Some(v) => *v = 1,
            None => return Err(format!("unknown feature {f:?}")),
        }
    }
    Ok(ArmModel::from_engage_probs([[*p00, *p01], [*p10, *p11]], map))
}

/// Whittle explorer: `[W(0), W(1), r(0), r(1)]` followed by `n + 1` rows of
/// `[λ, gap(0), gap(1)]` for λ evenly spaced on `[lo, hi]`, where
/// `gap(s) = Q(s, passive, λ) − Q(s, active, λ)`.
pub fn whittle_explorer_rs(
    engage: &[f64],
    features: &str,
    program: &str,
    discount: f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<Vec<f64>, String> {
    let arm = arm(engage, features)?;
    let known = arm.features.keys().cloned().collect();
    let program = parse_reward(program, &known).map_err(|e| e.to_string())?;
    let params = WhittleParams::default();
    let w = whittle_index(&arm, &program, discount, &params).map_err(|e| e.to_string())?;
    let r = program.state_rewards(&arm.features).map_err(|e| e.to_string())?;
    let mut out = vec![w[0], w[1], r[0], r[1]];
    let n = n.max(1);
    for i in 0..=n {
        let lambda = lo + (hi - lo) * i as f64 / n as f64;
        let g = q_gap(&arm.transitions, r, discount, lambda, &params).map_err(|e| e.to_string())?;
        out.extend([lambda, g[0], g[1]]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn whittle_explorer(
    engage: &[f64],
    features: &str,
    program: &str,
    discount: f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<Vec<f64>, JsError> {
    whittle_explorer_rs(engage, features, program, discount, lo, hi, n).map_err(js)
}

/// Feature names the explorer accepts, comma-separated.
#[wasm_bindgen]
pub fn feature_names() -> String {
    all_features().join(",")
}
