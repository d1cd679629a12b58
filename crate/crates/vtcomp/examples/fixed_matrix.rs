//! Per-image matrix optimization: one episode, one fixed compression matrix
//! trained by gradient descent on softmax logits against the uncompressed
//! teacher-forced traces. Prints the loss trajectory, the learned row
//! structure, and the overlap of retained tokens with prompt attention.
//!
//!   cargo run --release --example fixed_matrix [n] [m] [epochs]

use vtcomp::compress::{retained_token_analysis, FixedMatrixConfig};
use vtcomp::toy::{
    build_patch_recall_model, gen_episodes, prompt_attention, ClassLayout, EpisodeGenConfig,
    FrozenModelSpec,
};

fn main() -> vtcomp::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, dft: usize| -> usize {
        args.get(i).map(|s| s.parse().unwrap()).unwrap_or(dft)
    };
    let n = arg(1, 64);
    let m = arg(2, 16);
    let epochs = arg(3, 500);

    let spec = FrozenModelSpec::default();
    let model = build_patch_recall_model(&spec, 7)?;
    let episodes = gen_episodes(
        &spec,
        &EpisodeGenConfig {
            n_tokens: vec![n],
            n_turns: 3,
            count: 1,
            seed: 42,
            layout: ClassLayout::default(),
        },
    )?;
    let episode = &episodes[0];

    let cfg = FixedMatrixConfig {
        epochs,
        ..FixedMatrixConfig::for_m(m)
    };
    println!(
        "optimizing a {}x{} matrix: alpha={} sigma_raw={} lr={} epochs={}",
        m, n, cfg.alpha, cfg.sigma_raw, cfg.lr, cfg.epochs
    );

    let result = vtcomp::compress::train_fixed_matrix(&model, episode, &cfg)?;
    let first = &result.history[0];
    let last = result.history.last().unwrap();
    for (label, e) in [("initial", first), ("final", last)] {
        println!(
            "  {:<7} loss {:.6}  l_pred {:.6}  l_entropy {:.6}",
            label, e.loss, e.l_pred, e.l_entropy
        );
    }
    println!(
        "  l_pred reduced to {:.2}% of its initial value",
        100.0 * last.l_pred / first.l_pred
    );

    // Row structure: entropy near zero means the row picked a single source.
    let p = &result.matrix;
    let mut peaked = 0usize;
    for i in 0..p.m() {
        let row = p.tensor().row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max > 0.99 {
            peaked += 1;
        }
    }
    println!("  {}/{} rows concentrated (> 0.99 mass on one source)", peaked, p.m());

    // Which original tokens survive, and do they match what the decoder
    // attends to on the first prompt?
    let scores = prompt_attention(&model, episode)?;
    let overlap = retained_token_analysis(p, &scores)?;
    println!(
        "  retained-vs-attention overlap {:.3} (chance {:.3}), column-mass rank corr {:.3}",
        overlap.overlap_fraction, overlap.chance_level, overlap.column_mass_rank_corr
    );
    Ok(())
}
