//! Every reduction strategy as the same object: a nonnegative row-stochastic
//! matrix applied to the image tokens. Pruning strategies become one-hot
//! selection rows, pooling becomes window-uniform rows, and the learned
//! generator produces dense rows; the dialogue code never branches.
//!
//!   cargo run --release --example baselines_unified

use vtcomp::baselines::{
    attention_prune_matrix, random_matrix, sample_matrix, spatial_pool_matrix,
};
use vtcomp::compress::CompressionMatrix;
use vtcomp::meta::{generate, init_params, MetaConfig};
use vtcomp::toy::{
    build_patch_recall_model, gen_episodes, prompt_attention, run_dialogue, ClassLayout,
    DecodeMode, EpisodeGenConfig, FrozenModelSpec,
};

fn describe(name: &str, p: &CompressionMatrix) {
    let t = p.tensor();
    let mut one_hot_rows = 0usize;
    let mut max_row_sum_err = 0.0f64;
    for i in 0..p.m() {
        let row = t.row(i);
        let sum: f64 = row.iter().sum();
        max_row_sum_err = max_row_sum_err.max((sum - 1.0).abs());
        if row.contains(&1.0) {
            one_hot_rows += 1;
        }
    }
    println!(
        "  {:<16} {}x{}  selection={}  one-hot rows {}/{}  max |row sum - 1| {:.1e}",
        name,
        p.m(),
        p.n(),
        p.is_selection(),
        one_hot_rows,
        p.m(),
        max_row_sum_err
    );
}

fn main() -> vtcomp::Result<()> {
    let spec = FrozenModelSpec::default();
    let model = build_patch_recall_model(&spec, 7)?;
    let episodes = gen_episodes(
        &spec,
        &EpisodeGenConfig {
            n_tokens: vec![32],
            n_turns: 3,
            count: 1,
            seed: 21,
            layout: ClassLayout::default(),
        },
    )?;
    let episode = &episodes[0];
    let (n, m) = (episode.n(), 8);

    let scores = prompt_attention(&model, episode)?;
    let meta_params = init_params(
        &MetaConfig { d: spec.d, d_c: 4, kernel: 3, n_max: 64, ..MetaConfig::default() },
        0,
    )?;

    let arms: Vec<(&str, CompressionMatrix)> = vec![
        ("identity", CompressionMatrix::identity(n)),
        ("sample", sample_matrix(n, m)?),
        ("random", random_matrix(n, m, 17)?),
        ("spatial_pool", spatial_pool_matrix(n, m, 3)?),
        ("attention_prune", attention_prune_matrix(&scores, m)?),
        ("meta (init)", generate(&meta_params, &episode.image_tokens, m)?),
    ];

    println!("matrix views of each reducer on a {}-token image:", n);
    for (name, p) in &arms {
        describe(name, p);
    }

    // One code path runs them all.
    println!("greedy accuracy per arm over {} turns:", episode.turns.len());
    let golds: Vec<usize> = episode.turns.iter().map(|t| t.gold_class).collect();
    for (name, p) in &arms {
        let outcome = run_dialogue(&model, episode, Some(p), DecodeMode::Greedy)?;
        let correct = outcome.answers.iter().zip(&golds).filter(|(a, g)| a == g).count();
        println!("  {:<16} {}/{} correct, answers {:?}", name, correct, golds.len(), outcome.answers);
    }

    // Selection matrices reproduce plain row gathering bitwise.
    let sample = sample_matrix(n, m)?;
    let applied = sample.apply(&episode.image_tokens)?;
    for i in 0..m {
        let row = sample.tensor().row(i);
        let src = row.iter().position(|&v| v == 1.0).expect("one-hot row");
        assert_eq!(applied.row(i), episode.image_tokens.row(src), "selection must copy rows");
    }
    println!("sampling rows are bitwise copies of their source tokens");
    Ok(())
}
