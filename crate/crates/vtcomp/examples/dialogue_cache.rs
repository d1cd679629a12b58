//! Multi-turn dialogue on the frozen decoder, decoded incrementally through
//! the KV cache and then re-decoded from scratch at every position. The two
//! must agree to 1e-10; the incremental path only ever appends.
//!
//!   cargo run --release --example dialogue_cache

use vtcomp::baselines::{build_matrix, ReducerInputs, ReducerSpec};
use vtcomp::tensor::tape::Tape;
use vtcomp::tensor::Tensor;
use vtcomp::toy::{
    build_patch_recall_model, decode_step, gen_episodes, prefill, run_dialogue, ClassLayout,
    DecodeMode, EpisodeGenConfig, FrozenModelSpec,
};

fn main() -> vtcomp::Result<()> {
    let spec = FrozenModelSpec::default();
    let model = build_patch_recall_model(&spec, 7)?;
    let episodes = gen_episodes(
        &spec,
        &EpisodeGenConfig {
            n_tokens: vec![48],
            n_turns: 4,
            count: 1,
            seed: 5,
            layout: ClassLayout::default(),
        },
    )?;
    let episode = &episodes[0];
    let n = episode.n();

    // Compress to 50% so the cache runs over reduced visual tokens plus
    // full-resolution dialogue tokens, as in deployment.
    let reducer = ReducerSpec::Sample { rate: 0.5 };
    let inputs = ReducerInputs {
        image_tokens: &episode.image_tokens,
        attention_scores: None,
        meta_params: None,
    };
    let matrix = build_matrix(&reducer, &inputs, 0)?.expect("sampling always yields a matrix");
    println!("image {} tokens -> {} after sampling; {} turns", n, matrix.m(), episode.turns.len());

    // Incremental: prefill the compressed image once, then per turn decode
    // the prompt token and append the gold answer.
    let mut tape = Tape::new();
    let compressed = matrix.apply(&episode.image_tokens)?;
    let tokens = tape.constant(compressed.clone());
    let (mut cache, _) = prefill(&mut tape, &model, tokens)?;
    let mut incremental: Vec<Vec<f64>> = Vec::new();
    let mut context_rows: Vec<Vec<f64>> = (0..compressed.nrows())
        .map(|i| compressed.row(i).to_vec())
        .collect();

    for turn in &episode.turns {
        // Prompts address original coordinates even after compression.
        let prompt = spec.prompt_token(turn.query_pos, n);
        let var = tape.constant(Tensor::from_vec(&[1, spec.d], prompt.clone())?);
        let dist = decode_step(&mut tape, &model, &mut cache, var)?;
        incremental.push(tape.value(dist).row(0).to_vec());
        context_rows.push(prompt);

        let answer = spec.answer_token(turn.gold_class);
        let var = tape.constant(Tensor::from_vec(&[1, spec.d], answer.clone())?);
        decode_step(&mut tape, &model, &mut cache, var)?;
        context_rows.push(answer);
    }

    // Scratch: for each recorded position, rebuild the whole prefix and
    // prefill it; the last-row head distribution must match the cached one.
    let mut worst = 0.0f64;
    let mut prefix_len = compressed.nrows();
    for (t, cached_dist) in incremental.iter().enumerate() {
        prefix_len += 1; // the prompt token of turn t
        let flat: Vec<f64> = context_rows[..prefix_len].iter().flatten().copied().collect();
        let prefix = Tensor::from_vec(&[prefix_len, spec.d], flat)?;
        let mut scratch = Tape::new();
        let tokens = scratch.constant(prefix);
        let (_, dist) = prefill(&mut scratch, &model, tokens)?;
        let fresh = scratch.value(dist).row(0).to_vec();
        let diff = fresh
            .iter()
            .zip(cached_dist)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
        println!("  turn {}: cached == recomputed to {:.1e}", t + 1, diff);
        prefix_len += 1; // the answer token closes the turn
    }
    assert!(worst <= 1e-10, "cache drifted from recomputation");

    // The value-level wrapper gives the same dialogue with answers decoded.
    let outcome = run_dialogue(&model, episode, Some(&matrix), DecodeMode::Greedy)?;
    let golds: Vec<usize> = episode.turns.iter().map(|t| t.gold_class).collect();
    println!("greedy answers {:?} vs gold {:?}", outcome.answers, golds);
    Ok(())
}
