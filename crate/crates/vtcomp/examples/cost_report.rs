//! Analytic inference-cost model over compression rates: prefill FLOPs,
//! per-turn decode FLOPs, and KV-cache bytes for a 7B-class decoder, plus a
//! wall-clock measurement of the toy pipeline at one rate.
//!
//!   cargo run --release --example cost_report

use vtcomp::baselines::ReducerSpec;
use vtcomp::cost::{estimate_cost, measure_toy_runtime, ModelDims};
use vtcomp::toy::{
    build_patch_recall_model, gen_episodes, ClassLayout, EpisodeGenConfig, FrozenModelSpec,
};

fn main() -> vtcomp::Result<()> {
    let dims = ModelDims::calibration_7b();
    let (n_visual, n_text, answer_len, turns) = (576usize, 64usize, 16usize, 4usize);
    println!(
        "7B-class calibration: {} layers, d_model {}, ffn {}, vocab {}",
        dims.layers, dims.d_model, dims.ffn_width, dims.vocab
    );
    println!(
        "dialogue shape: {} visual tokens, {} text/turn, {} answer tokens, {} turns",
        n_visual, n_text, answer_len, turns
    );
    println!(
        "{:>5} {:>6} {:>14} {:>14} {:>14} {:>10}",
        "rate", "kept", "prefill", "decode/turn", "total", "kv"
    );
    let giga = |f: u128| format!("{:.2} GF", f as f64 / 1e9);
    let mib = |b: u128| format!("{:.1} MiB", b as f64 / (1024.0 * 1024.0));
    for rate in [0.0, 0.5, 0.75, 0.9, 0.95] {
        let report = estimate_cost(&dims, n_visual, n_text, answer_len, turns, rate)?;
        println!(
            "{:>5} {:>6} {:>14} {:>14} {:>14} {:>10}",
            rate,
            report.m_visual,
            giga(report.prefill_flops),
            giga(report.per_turn_decode_flops[0]),
            giga(report.total_flops),
            mib(report.kv_memory_bytes)
        );
    }

    let full = estimate_cost(&dims, n_visual, n_text, answer_len, turns, 0.0)?;
    let quarter = estimate_cost(&dims, n_visual / 2, n_text, answer_len, turns, 0.0)?;
    println!(
        "attention-score law: halving tokens divides prefill score FLOPs by {:.2} (exactly 4 at n_text = 0)",
        full.prefill_attn_score_flops as f64 / quarter.prefill_attn_score_flops as f64
    );

    // Wall clock on the toy pipeline: reduced context must actually be
    // faster end to end, generator cost included.
    let spec = FrozenModelSpec::default();
    let model = build_patch_recall_model(&spec, 7)?;
    let episodes = gen_episodes(
        &spec,
        &EpisodeGenConfig {
            n_tokens: vec![512],
            n_turns: 3,
            count: 1,
            seed: 1,
            layout: ClassLayout::default(),
        },
    )?;
    let runtime = measure_toy_runtime(
        &model,
        &episodes[0],
        &ReducerSpec::Sample { rate: 0.9 },
        None,
        5,
    )?;
    for arm in [&runtime.unreduced, &runtime.reduced] {
        println!(
            "  {:<8} median {:>9.3} ms  answers {:?}",
            arm.name,
            arm.median_ns as f64 / 1e6,
            arm.answers
        );
    }
    println!(
        "toy speedup at rate 0.9 on {} tokens: {:.1}x",
        episodes[0].n(),
        runtime.unreduced.median_ns as f64 / runtime.reduced.median_ns as f64
    );
    Ok(())
}
