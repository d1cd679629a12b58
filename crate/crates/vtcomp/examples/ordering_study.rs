//! Reducer ordering study on the patch-recall task: trains the matrix
//! generator, then compares it against sampling, random pruning, and
//! attention-based pruning over several training seeds.
//!
//!   cargo run --release --example ordering_study [lr] [epochs] [train_count] [d_c] [kernel] [seeds]

use vtcomp::baselines::ReducerSpec;
use vtcomp::meta::{init_params, MetaConfig};
use vtcomp::toy::{
    build_patch_recall_model, gen_episodes, ClassLayout, EpisodeGenConfig, FrozenModelSpec,
};
use vtcomp::trainer::{evaluate, train_meta, TrainConfig};

fn main() -> vtcomp::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, dft: f64| -> f64 { args.get(i).map(|s| s.parse().unwrap()).unwrap_or(dft) };
    let lr = arg(1, 0.3);
    let epochs = arg(2, 30.0) as usize;
    let train_count = arg(3, 240.0) as usize;
    let d_c = arg(4, 4.0) as usize;
    let kernel = arg(5, 3.0) as usize;
    let n_seeds = arg(6, 5.0) as u64;
    let alpha_entropy = arg(7, 1.0);
    let alpha_collapse = arg(8, 1.0);
    let train_turns = arg(9, 3.0) as usize;
    let rate = arg(10, 0.75);
    let clip = arg(11, 1.0);
    let layout = if arg(12, 0.0) as usize == 1 { ClassLayout::Iid } else { ClassLayout::default() };

    let spec = FrozenModelSpec::default();
    let model = build_patch_recall_model(&spec, 7)?;
    let n = 64;
    let turns = 3;

    let eval_eps = gen_episodes(
        &spec,
        &EpisodeGenConfig {
            n_tokens: vec![n],
            n_turns: turns,
            count: 1000,
            seed: 999,
            layout,
        },
    )?;

    let meta_cfg = MetaConfig {
        d: spec.d,
        d_c,
        kernel,
        n_max: 2 * n,
        ..MetaConfig::default()
    };

    println!("lr={} epochs={} train_count={} d_c={} kernel={}", lr, epochs, train_count, d_c, kernel);
    println!("seed  meta    init    sample  random  aprune  aprune_t23 sample_t23");
    let mut meta_wins = 0;
    for seed in 0..n_seeds {
        let train_eps = gen_episodes(
            &spec,
            &EpisodeGenConfig {
                n_tokens: vec![n],
                n_turns: train_turns,
                count: train_count,
                seed: 100 + seed,
                layout,
            },
        )?;
        let init = init_params(&meta_cfg, seed)?;
        let cfg = TrainConfig {
            lr,
            grad_clip: (clip > 0.0).then_some(clip),
            epochs,
            batch_size: 8,
            alpha_entropy,
            alpha_collapse,
            rate,
            seed,
            ..TrainConfig::default()
        };
        let outcome = match train_meta(&model, &train_eps, &init, &cfg) {
            Ok(o) => o,
            Err(e) => {
                println!("{:4}  training diverged: {}", seed, e);
                continue;
            }
        };

        let meta = evaluate(&model, &eval_eps, &ReducerSpec::Meta { rate }, Some(&outcome.best_params))?;
        let init_eval = evaluate(&model, &eval_eps, &ReducerSpec::Meta { rate }, Some(&init))?;
        let sample = evaluate(&model, &eval_eps, &ReducerSpec::Sample { rate }, None)?;
        let random = evaluate(
            &model,
            &eval_eps,
            &ReducerSpec::Random { rate, seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) },
            None,
        )?;
        let aprune = evaluate(&model, &eval_eps, &ReducerSpec::AttentionPrune { rate }, None)?;
        let t23 = |s: &vtcomp::trainer::EvalSummary| {
            (s.per_turn_accuracy[1] + s.per_turn_accuracy[2]) / 2.0
        };
        let win = meta.avg_accuracy > sample.avg_accuracy && meta.avg_accuracy > random.avg_accuracy;
        meta_wins += win as usize;
        println!(
            "{:4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}     {:.4}  best_ep={} {}",
            seed,
            meta.avg_accuracy,
            init_eval.avg_accuracy,
            sample.avg_accuracy,
            random.avg_accuracy,
            aprune.avg_accuracy,
            t23(&aprune),
            t23(&sample),
            outcome.best_epoch,
            if win { "WIN" } else { "-" },
        );
    }
    println!("meta beats sample and random in {}/{} seeds", meta_wins, n_seeds);
    Ok(())
}
