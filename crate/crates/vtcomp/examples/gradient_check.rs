//! Finite-difference validation of the full differentiable pipeline:
//! generator parameters -> compression matrix -> compressed tokens ->
//! frozen decoder -> trace KL. Every parameter coordinate is perturbed
//! centrally and compared against the reverse-mode gradient.
//!
//!   cargo run --release --example gradient_check

use vtcomp::compress::{loss_pred, m_for_rate, PredictionTrace};
use vtcomp::meta::{init_params, MetaConfig, MetaOnTape, PositionalMode};
use vtcomp::tensor::gradcheck::{analytic_gradient, finite_diff_check, DEFAULT_FLOOR};
use vtcomp::tensor::tape::{Tape, Var};
use vtcomp::toy::{
    build_patch_recall_model, gen_episodes, run_dialogue, run_dialogue_on_tape, ClassLayout,
    DecodeMode, EpisodeGenConfig, FrozenModelSpec,
};

/// Views already-staged parameter vars as a generator, in the fixed order
/// (w_q, w_k, omega, [e_pos]) the check perturbs them in.
fn as_generator(cfg: &MetaConfig, vars: &[Var]) -> MetaOnTape {
    MetaOnTape {
        cfg: cfg.clone(),
        w_q: vars[0],
        w_k: vars[1],
        omega: vars[2],
        e_pos: vars.get(3).copied(),
    }
}

fn main() -> vtcomp::Result<()> {
    // Tiny instances keep the O(coords) finite-difference sweep fast while
    // still covering pooling windows > 1 and the learned positional table.
    let spec = FrozenModelSpec {
        d: 8,
        classes: 2,
        d_pos: 3,
        ..FrozenModelSpec::default()
    };
    let model = build_patch_recall_model(&spec, 7)?;

    for (n, d_c, kernel, positional) in [
        (9, 2, 1, PositionalMode::FixedSinusoid),
        (12, 4, 3, PositionalMode::FixedSinusoid),
        (16, 3, 2, PositionalMode::Learned),
    ] {
        let episodes = gen_episodes(
            &spec,
            &EpisodeGenConfig {
                n_tokens: vec![n],
                n_turns: 2,
                count: 1,
                seed: 11,
                layout: ClassLayout::default(),
            },
        )?;
        let episode = &episodes[0];
        let m = m_for_rate(n, 0.5)?;

        // The uncompressed teacher-forced run is the frozen KL reference.
        let reference =
            PredictionTrace::concat(&run_dialogue(&model, episode, None, DecodeMode::Forced)?.traces);

        let cfg = MetaConfig {
            d: spec.d,
            d_c,
            kernel,
            n_max: 32,
            positional,
        };
        let init = init_params(&cfg, 3)?;
        let mut flat = vec![init.w_q.clone(), init.w_k.clone(), init.omega.clone()];
        if let Some(e) = &init.e_pos {
            flat.push(e.clone());
        }

        let model_ref = &model;
        let cfg_ref = &cfg;
        let build = move |tape: &mut Tape, vars: &[Var]| {
            let staged = as_generator(cfg_ref, vars);
            let image = tape.constant(episode.image_tokens.clone());
            let p = staged.generate(tape, image, m)?;
            let compressed = tape.matmul(p, image)?;
            let run = run_dialogue_on_tape(tape, model_ref, compressed, episode, DecodeMode::Forced)?;
            let all: Vec<_> = run.turn_traces.iter().flatten().copied().collect();
            loss_pred(tape, &reference, &all)
        };

        let grads = analytic_gradient(&build, &flat)?;
        let total_coords: usize = grads.iter().map(|g| g.len()).sum();
        let check = finite_diff_check(&build, &flat, 1e-5, DEFAULT_FLOOR)?;
        println!(
            "n={:2} d_c={} kernel={} positional={:<13} coords={:3}  max rel err {:.3e} (param {}, coord {})",
            n,
            d_c,
            kernel,
            format!("{:?}", cfg.positional),
            total_coords,
            check.max_rel_err,
            check.worst_param,
            check.worst_coord
        );
        assert!(check.max_rel_err <= 1e-4, "gradient does not match finite differences");
    }
    println!("all gradients match central differences within 1e-4");
    Ok(())
}
