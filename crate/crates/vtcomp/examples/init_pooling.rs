//! Monte-Carlo check that the tied initialization acts as average pooling:
//! with W_q = W_k, unit gates, and positional encodings that cancel, the
//! expected raw score inside a pooling window is d * d_c * sigma_c^2 *
//! sigma_w^2 while every out-of-window score has mean zero.
//!
//!   cargo run --release --example init_pooling [draws]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtcomp::meta::{init_params, raw_scores, sinusoid_table, MetaConfig, PositionalMode};
use vtcomp::tensor::tape::frac_window_anchor;
use vtcomp::tensor::Tensor;

fn main() -> vtcomp::Result<()> {
    let draws: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().unwrap())
        .unwrap_or(4000);
    let (n, m, d, d_c, kernel) = (8usize, 4usize, 32usize, 4usize, 1usize);
    let sigma_c = 0.5f64;
    let sigma_w_sq = 1.0 / d_c as f64;
    let analytic = d as f64 * d_c as f64 * sigma_c * sigma_c * sigma_w_sq;

    let cfg = MetaConfig {
        d,
        d_c,
        kernel,
        n_max: n,
        positional: PositionalMode::FixedSinusoid,
    };
    let sinusoid = sinusoid_table(n, d);
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    let mut in_window = Vec::new();
    let mut out_window = Vec::new();
    for draw in 0..draws {
        // Fresh tied weights each draw; expectations are over both the
        // weights and the tokens.
        let mut params = init_params(&cfg, draw as u64)?;
        params.w_k = params.w_q.clone();

        // Uniform(-1, 1) scaled to variance sigma_c^2, with the positional
        // table pre-subtracted so X + E_pos has zero-mean iid entries.
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                let u: f64 = rng.gen_range(-1.0..1.0);
                data.push(u * sigma_c * 3.0f64.sqrt() - sinusoid.at2(i, j));
            }
        }
        let image = Tensor::from_vec(&[n, d], data)?;

        // raw_scores folds in the 1/sqrt(d_c) softmax temperature; undo it
        // to compare against the plain bilinear expectation.
        let scores = raw_scores(&params, &image, m)?;
        for i in 0..m {
            let anchor = frac_window_anchor(i, n, m, kernel);
            for j in 0..n {
                let raw = scores.at2(i, j) * (d_c as f64).sqrt();
                if j >= anchor && j < anchor + kernel {
                    in_window.push(raw);
                } else {
                    out_window.push(raw);
                }
            }
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let se = |v: &[f64]| {
        let mu = mean(v);
        let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (v.len() - 1) as f64;
        (var / v.len() as f64).sqrt()
    };

    let in_mean = mean(&in_window);
    let out_mean = mean(&out_window);
    let out_se = se(&out_window);
    println!("{} draws, {} in-window and {} out-of-window samples", draws, in_window.len(), out_window.len());
    println!("  in-window  mean {:.4}  analytic {:.4}  ({:+.2}%)", in_mean, analytic, 100.0 * (in_mean / analytic - 1.0));
    println!("  out-window mean {:+.2e}  [3 SE = {:.2e}]", out_mean, 3.0 * out_se);
    assert!((in_mean / analytic - 1.0).abs() < 0.05, "in-window mean misses the pooling value");
    assert!(out_mean.abs() < 3.0 * out_se, "out-of-window scores are biased");
    println!("initialization behaves as average pooling");
    Ok(())
}
