//! Trains the matrix generator end to end on generated dialogue episodes and
//! reports the loss trajectory plus holdout accuracy per epoch. A compact,
//! value-level version of what the `train` subcommand does.
//!
//!   cargo run --release --example train_generator [episodes] [epochs] [lr]

use vtcomp::baselines::ReducerSpec;
use vtcomp::meta::{init_params, MetaConfig};
use vtcomp::toy::{
    build_patch_recall_model, gen_episodes, ClassLayout, EpisodeGenConfig, FrozenModelSpec,
};
use vtcomp::trainer::{evaluate, train_meta, TrainConfig};

fn main() -> vtcomp::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, dft: f64| -> f64 { args.get(i).map(|s| s.parse().unwrap()).unwrap_or(dft) };
    let count = arg(1, 128.0) as usize;
    let epochs = arg(2, 20.0) as usize;
    let lr = arg(3, 0.3);

    let spec = FrozenModelSpec::default();
    let model = build_patch_recall_model(&spec, 7)?;
    let rate = 0.75;

    let train_eps = gen_episodes(
        &spec,
        &EpisodeGenConfig {
            n_tokens: vec![64],
            n_turns: 3,
            count,
            seed: 100,
            layout: ClassLayout::default(),
        },
    )?;
    let eval_eps = gen_episodes(
        &spec,
        &EpisodeGenConfig {
            n_tokens: vec![64],
            n_turns: 3,
            count: 200,
            seed: 999,
            layout: ClassLayout::default(),
        },
    )?;

    let meta_cfg = MetaConfig { d: spec.d, d_c: 8, kernel: 3, n_max: 128, ..MetaConfig::default() };
    let init = init_params(&meta_cfg, 0)?;
    let cfg = TrainConfig {
        lr,
        grad_clip: Some(1.0),
        epochs,
        batch_size: 8,
        alpha_entropy: 0.1,
        alpha_collapse: 1.0,
        rate,
        ..TrainConfig::default()
    };

    println!(
        "training on {} episodes ({} holdout), lr {}, {} epochs, rate {}",
        count,
        (count as f64 * cfg.holdout_fraction).round() as usize,
        lr,
        epochs,
        rate
    );
    let outcome = train_meta(&model, &train_eps, &init, &cfg)?;

    // First/last few steps show the objective moving; the full curve is in
    // outcome.steps.
    let show = |i: usize| {
        let s = &outcome.steps[i];
        println!(
            "  step {:4}  total {:.4}  pred {:.4}  entropy {:.4}  collapse {:.4}  |g| {:.3}",
            s.step, s.total, s.l_pred, s.l_entropy, s.l_collapse, s.grad_norm_pre
        );
    };
    show(0);
    show(outcome.steps.len() / 2);
    show(outcome.steps.len() - 1);
    println!(
        "holdout accuracy by epoch: {:?}",
        outcome
            .holdout_accuracy
            .iter()
            .map(|a| (a * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );
    println!("best epoch {}", outcome.best_epoch);

    // Compare the selected checkpoint against untrained and fixed baselines
    // on a held-out set.
    for (name, reducer, params) in [
        ("trained", ReducerSpec::Meta { rate }, Some(&outcome.best_params)),
        ("init", ReducerSpec::Meta { rate }, Some(&init)),
        ("sample", ReducerSpec::Sample { rate }, None),
        ("none", ReducerSpec::None, None),
    ] {
        let summary = evaluate(&model, &eval_eps, &reducer, params)?;
        println!(
            "  {:<8} avg accuracy {:.4}  per-turn {:?}  trace KL {:.4}",
            name,
            summary.avg_accuracy,
            summary
                .per_turn_accuracy
                .iter()
                .map(|a| (a * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>(),
            summary.avg_l_pred
        );
    }
    Ok(())
}
