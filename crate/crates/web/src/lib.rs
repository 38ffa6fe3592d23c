//! WebAssembly bindings for the demo page in `www/`. Every export returns a
//! JSON string; failures come back as `{"error": "..."}`.

use serde_json::{json, Value};
use simpletron::attention::AttentionKind;
use simpletron::bench::{bench_scaling, BenchConfig, PointStatus};
use simpletron::tasks::{eval_listops_oracle, gen_listops_exprs, listops_tokens_to_string, ListOpsSpec};
use simpletron::{Element, Rng, Tensor};
use wasm_bindgen::prelude::*;

fn respond(r: simpletron::Result<Value>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

/// Peak allocation and flop count of one attention layer, both kinds, at
/// each comma-separated length. No timing: browsers lack a monotonic clock
/// in this target.
#[wasm_bindgen]
pub fn scaling_curve(lengths: &str, seed: u32) -> String {
    respond((|| {
        let lengths = lengths
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| simpletron::Error::Parse(format!("lengths: {e}")))?;
        let mut cfg = BenchConfig::new(vec![AttentionKind::Simple, AttentionKind::Softmax], lengths, seed as u64);
        cfg.timing = false;
        cfg.memory_budget_bytes = 512 << 20;
        let report = bench_scaling(&cfg)?;
        let points: Vec<Value> = report
            .records
            .iter()
            .map(|r| {
                json!({
                    "kind": r.kind.name(),
                    "L": r.len,
                    "peak_bytes": r.peak_bytes,
                    "flops": r.flops,
                    "over_budget": r.status == PointStatus::OverBudget,
                })
            })
            .collect();
        Ok(json!({ "points": points }))
    })())
}

fn max_rel_diff<T: Element>(len: usize, d: usize, rng: &mut Rng) -> simpletron::Result<f64> {
    let mut draw = || Tensor::<T>::from_f64(&(0..len * d).map(|_| rng.normal()).collect::<Vec<_>>(), &[len, d]);
    let (q, k, v) = (draw()?, draw()?, draw()?);
    let quadratic = q.matmul(&k.transpose()?)?.matmul(&v)?.to_f64_vec();
    let linear = q.matmul(&k.transpose()?.matmul(&v)?)?.to_f64_vec();
    let scale = quadratic.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    Ok(quadratic.iter().zip(&linear).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale)
}

/// Largest difference between `(Q Kᵀ) V` and `Q (Kᵀ V)` for random `L × d`
/// inputs, relative to the largest output entry, in f32 and f64.
#[wasm_bindgen]
pub fn associativity_check(len: usize, d: usize, seed: u32) -> String {
    respond((|| {
        if len == 0 || d == 0 || len * d > 1 << 20 {
            return Err(simpletron::Error::Param(format!("need 0 < L·d ≤ 2^20, got {len}·{d}")));
        }
        let root = Rng::new(seed as u64);
        Ok(json!({
            "L": len,
            "d": d,
            "f32": max_rel_diff::<f32>(len, d, &mut root.split(0))?,
            "f64": max_rel_diff::<f64>(len, d, &mut root.split(0))?,
            "quadratic_flops": 4 * len * len * d,
            "linear_flops": 4 * len * d * d,
        }))
    })())
}

/// One random ListOps expression with its token ids and value.
#[wasm_bindgen]
pub fn listops_sample(seed: u32, max_depth: usize, max_args: usize) -> String {
    respond((|| {
        let spec = ListOpsSpec {
            max_depth,
            max_args,
            ..ListOpsSpec::default()
        };
        let expr = gen_listops_exprs(&spec, 1, &mut Rng::new(seed as u64))?.remove(0);
        let tokens = expr.tokens();
        Ok(json!({
            "expression": listops_tokens_to_string(&tokens),
            "tokens": tokens,
            "depth": expr.depth(),
            "value": eval_listops_oracle(&expr),
        }))
    })())
}
