//! Analytic FLOP and memory accounting for multi-turn inference with a KV
//! cache, plus wall-clock measurement on the toy decoder.
//!
//! Conventions, also echoed in report headers:
//!
//! - 1 multiply-accumulate = 2 FLOPs; only matrix products are counted
//!   (softmax, norms and activations are ignored).
//! - Prefill scores the full `S x S` attention matrix, so its score FLOPs are
//!   exactly quadratic in the prefill length. Decode reuses the cache: one
//!   token at prior context `L` scores `L + 1` pairs, exactly linear.
//! - The output head is counted once per incrementally decoded token and once
//!   for the prefill's final position.
//! - KV entries are stored at [`KV_BYTES_PER_VALUE`] bytes each.
//!
//! All arithmetic is `u128` integer math so the scaling laws hold exactly,
//! not just to rounding error.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{build_matrix, ReducerInputs, ReducerSpec};
use crate::compress::m_for_rate;
use crate::error::{Error, Result};
use crate::meta::MetaGeneratorParams;
use crate::toy::{prompt_attention, run_dialogue, DecodeMode, DialogueEpisode, FrozenModel};

/// Bytes per stored key/value scalar (half precision).
pub const KV_BYTES_PER_VALUE: u128 = 2;

/// Decoder dimensions for accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub vocab: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.ffn_width == 0
            || self.vocab == 0
        {
            return Err(Error::invalid("model dims", "all dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(
                "model dims",
                format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    /// A 7B-class decoder, for the calibration printout.
    pub fn calibration_7b() -> ModelDims {
        ModelDims {
            layers: 32,
            d_model: 4096,
            n_heads: 32,
            ffn_width: 11008,
            vocab: 32000,
        }
    }

    /// Per-token MACs through projections and FFN in one layer.
    fn linear_macs_per_token_layer(&self) -> u128 {
        let d = self.d_model as u128;
        let f = self.ffn_width as u128;
        4 * d * d + 2 * d * f
    }
}

/// Exact FLOP/memory breakdown of one multi-turn dialogue.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    /// Counting convention, for report consumers.
    pub flop_convention: String,
    pub n_visual: usize,
    /// Visual tokens after reduction: `max(1, round((1 - rate) * n_visual))`.
    pub m_visual: usize,
    pub rate: f64,
    pub n_text_per_turn: usize,
    pub answer_len: usize,
    pub turns: usize,
    /// Prefill length: reduced visual tokens plus the first turn's prompt.
    pub prefill_tokens: usize,
    /// QK^T scores over the full prefill matrix.
    pub prefill_attn_score_flops: u128,
    /// Attention-weighted value mix during prefill.
    pub prefill_attn_mix_flops: u128,
    /// Projections, FFN, and one output-head evaluation.
    pub prefill_linear_flops: u128,
    pub prefill_flops: u128,
    /// Cached decode cost of each turn (prompt feed plus answer tokens).
    pub per_turn_decode_flops: Vec<u128>,
    pub total_flops: u128,
    /// Cache bytes at dialogue end.
    pub kv_memory_bytes: u128,
    pub context_len_final: usize,
}

/// FLOPs of one cached decode step at prior context `L`: projections + FFN,
/// `L + 1` score and mix pairs, and the output head.
pub fn decode_token_flops(dims: &ModelDims, context_before: u128) -> u128 {
    let d = dims.d_model as u128;
    let layers = dims.layers as u128;
    let attended = context_before + 1;
    2 * (layers * (dims.linear_macs_per_token_layer() + 2 * d * attended)
        + d * dims.vocab as u128)
}

/// Closed-form cost of `k` consecutive cached tokens starting at context
/// `l0`: the arithmetic series over `L+1` is summed exactly.
fn decode_run_macs(dims: &ModelDims, l0: u128, k: u128) -> u128 {
    if k == 0 {
        return 0;
    }
    let d = dims.d_model as u128;
    let layers = dims.layers as u128;
    let attended_sum = k * (l0 + 1) + k * (k - 1) / 2;
    layers * (k * dims.linear_macs_per_token_layer() + 2 * d * attended_sum)
        + k * d * dims.vocab as u128
}

/// Exact dialogue accounting. The first turn's prompt is part of the prefill;
/// every later prompt and every answer token is a cached decode step.
/// Reduction applies to visual tokens only.
pub fn estimate_cost(
    dims: &ModelDims,
    n_visual: usize,
    n_text_per_turn: usize,
    answer_len: usize,
    turns: usize,
    rate: f64,
) -> Result<CostReport> {
    dims.validate()?;
    if n_visual == 0 {
        return Err(Error::invalid("estimate_cost", "n_visual must be positive"));
    }
    if turns > 0 && n_text_per_turn == 0 {
        return Err(Error::invalid(
            "estimate_cost",
            "turns require a positive prompt length",
        ));
    }
    let m_visual = if rate == 0.0 {
        n_visual
    } else {
        m_for_rate(n_visual, rate)?
    };

    let d = dims.d_model as u128;
    let layers = dims.layers as u128;
    let prefill_tokens = m_visual + if turns > 0 { n_text_per_turn } else { 0 };
    let s = prefill_tokens as u128;
    let score_macs = layers * d * s * s;
    let mix_macs = layers * d * s * s;
    let linear_macs = layers * s * dims.linear_macs_per_token_layer() + d * dims.vocab as u128;

    let mut per_turn = Vec::with_capacity(turns);
    let mut context = s;
    for turn in 0..turns {
        let prompt_steps = if turn == 0 { 0 } else { n_text_per_turn as u128 };
        let k = prompt_steps + answer_len as u128;
        per_turn.push(2 * decode_run_macs(dims, context, k));
        context += k;
    }

    let prefill_attn_score_flops = 2 * score_macs;
    let prefill_attn_mix_flops = 2 * mix_macs;
    let prefill_linear_flops = 2 * linear_macs;
    let prefill_flops = prefill_attn_score_flops + prefill_attn_mix_flops + prefill_linear_flops;
    let total_flops = prefill_flops + per_turn.iter().sum::<u128>();
    let kv_memory_bytes = 2 * layers * context * d * KV_BYTES_PER_VALUE;

    Ok(CostReport {
        flop_convention: "2 FLOPs per multiply-accumulate; matrix products only".to_string(),
        n_visual,
        m_visual,
        rate,
        n_text_per_turn,
        answer_len,
        turns,
        prefill_tokens,
        prefill_attn_score_flops,
        prefill_attn_mix_flops,
        prefill_linear_flops,
        prefill_flops,
        per_turn_decode_flops: per_turn,
        total_flops,
        kv_memory_bytes,
        context_len_final: context as usize,
    })
}

/// Wall-clock samples for one arm of the toy-runtime comparison.
#[derive(Debug, Clone, Serialize)]
pub struct RuntimeArm {
    pub name: String,
    pub sample_ns: Vec<u128>,
    pub median_ns: u128,
    /// Greedy answers, for cross-arm correctness comparison.
    pub answers: Vec<usize>,
    pub correct: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RuntimeReport {
    pub repeats: usize,
    pub unreduced: RuntimeArm,
    pub reduced: RuntimeArm,
}

fn median(mut xs: Vec<u128>) -> u128 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

/// Times full dialogues on the toy decoder, unreduced versus reduced by the
/// given strategy. The matrix is built once per episode (compression happens
/// once, before prefill); its application is inside the timed region.
pub fn measure_toy_runtime(
    model: &FrozenModel,
    episode: &DialogueEpisode,
    reducer: &ReducerSpec,
    meta_params: Option<&MetaGeneratorParams>,
    repeats: usize,
) -> Result<RuntimeReport> {
    if repeats < 3 {
        return Err(Error::invalid("measure_toy_runtime", "repeats must be >= 3"));
    }
    reducer.validate()?;
    if matches!(reducer, ReducerSpec::None) {
        return Err(Error::invalid(
            "measure_toy_runtime",
            "the reduced arm needs an actual reducer",
        ));
    }
    let scores = match reducer {
        ReducerSpec::AttentionPrune { .. } => Some(prompt_attention(model, episode)?),
        _ => None,
    };
    let inputs = ReducerInputs {
        image_tokens: &episode.image_tokens,
        attention_scores: scores.as_deref(),
        meta_params,
    };
    let matrix = build_matrix(reducer, &inputs, 0)?
        .expect("non-none reducer always yields a matrix");

    let run_arm = |name: &str, use_matrix: bool| -> Result<RuntimeArm> {
        let mut sample_ns = Vec::with_capacity(repeats);
        let mut answers = Vec::new();
        for rep in 0..repeats {
            let started = Instant::now();
            let out = run_dialogue(
                model,
                episode,
                if use_matrix { Some(&matrix) } else { None },
                DecodeMode::Greedy,
            )?;
            sample_ns.push(started.elapsed().as_nanos());
            if rep == 0 {
                answers = out.answers;
            }
        }
        let correct = answers
            .iter()
            .zip(&episode.turns)
            .filter(|(a, t)| **a == t.gold_class)
            .count();
        Ok(RuntimeArm {
            name: name.to_string(),
            median_ns: median(sample_ns.clone()),
            sample_ns,
            answers,
            correct,
        })
    };

    Ok(RuntimeReport {
        repeats,
        unreduced: run_arm("none", false)?,
        reduced: run_arm(reducer.name(), true)?,
    })
}
