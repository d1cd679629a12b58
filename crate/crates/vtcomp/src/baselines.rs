//! Baseline reducers, each expressed as a compression matrix so every
//! strategy flows through the same application path.
//!
//! Selection-style reducers (random, equidistant sample, attention prune)
//! produce one-hot rows; spatial pooling produces window-uniform rows. The
//! uniform representation is what lets a single dialogue/cost pipeline
//! compare them against the learned generator without special cases.

use serde::{Deserialize, Serialize};

use crate::compress::{m_for_rate, CompressionMatrix};
use crate::error::{Error, Result};
use crate::meta::{self, MetaGeneratorParams};
use crate::tensor::tape::frac_window_anchor;
use crate::tensor::Tensor;

/// A reducer choice as it appears in configs and reports. `rate` is the
/// fraction of tokens removed and must lie strictly inside (0, 1); the kept
/// count is `max(1, round((1 - rate) * n))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReducerSpec {
    /// No reduction; the dialogue runs on the raw tokens.
    None,
    /// Uniform choice of `m` distinct tokens, kept in image order.
    Random { rate: f64, seed: u64 },
    /// Equidistant keep: source `round(i * n / m)` per row, collisions pushed
    /// forward. Always keeps the first token.
    Sample { rate: f64 },
    /// Fractional-stride average pooling with the given window.
    SpatialPool { rate: f64, kernel: usize },
    /// Keep the `m` tokens with the highest turn-1 prompt attention.
    AttentionPrune { rate: f64 },
    /// Learned generator; parameters come from a checkpoint.
    Meta { rate: f64 },
}

impl ReducerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ReducerSpec::None => "none",
            ReducerSpec::Random { .. } => "random",
            ReducerSpec::Sample { .. } => "sample",
            ReducerSpec::SpatialPool { .. } => "spatial_pool",
            ReducerSpec::AttentionPrune { .. } => "attention_prune",
            ReducerSpec::Meta { .. } => "meta",
        }
    }

    pub fn rate(&self) -> Option<f64> {
        match self {
            ReducerSpec::None => None,
            ReducerSpec::Random { rate, .. }
            | ReducerSpec::Sample { rate }
            | ReducerSpec::SpatialPool { rate, .. }
            | ReducerSpec::AttentionPrune { rate }
            | ReducerSpec::Meta { rate } => Some(*rate),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(rate) = self.rate() {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(Error::invalid(
                    "reducer",
                    format!("rate {} must lie strictly inside (0, 1)", rate),
                ));
            }
        }
        if let ReducerSpec::SpatialPool { kernel, .. } = self {
            if *kernel == 0 {
                return Err(Error::invalid("reducer", "pool kernel must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Selection matrix over `m` distinct uniformly chosen tokens, sorted so the
/// compressed sequence preserves image order.
pub fn random_matrix(n: usize, m: usize, seed: u64) -> Result<CompressionMatrix> {
    check_m(n, m)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, n, m).into_vec();
    picks.sort_unstable();
    CompressionMatrix::from_selection(&picks, n)
}

/// Equidistant selection: row `i` keeps `round(i * n / m)`, collisions pushed
/// to the next free index. The first token is always kept.
pub fn sample_matrix(n: usize, m: usize) -> Result<CompressionMatrix> {
    check_m(n, m)?;
    let mut sources = Vec::with_capacity(m);
    let mut prev: Option<usize> = None;
    for i in 0..m {
        let mut s = ((i * n) as f64 / m as f64).round() as usize;
        if let Some(p) = prev {
            if s <= p {
                s = p + 1;
            }
        }
        let s = s.min(n - 1);
        sources.push(s);
        prev = Some(s);
    }
    CompressionMatrix::from_selection(&sources, n)
}

/// Window-average pooling as an explicit matrix: row `i` spreads `1/kernel`
/// over the window starting at the shared fractional-stride anchor, so the
/// matrix agrees with the differentiable pooling op by construction.
pub fn spatial_pool_matrix(n: usize, m: usize, kernel: usize) -> Result<CompressionMatrix> {
    check_m(n, m)?;
    if kernel == 0 {
        return Err(Error::invalid("spatial_pool", "kernel must be >= 1"));
    }
    let k = kernel.min(n);
    let mut p = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let a = frac_window_anchor(i, n, m, k);
        for u in a..a + k {
            p.set2(i, u, 1.0 / k as f64);
        }
    }
    CompressionMatrix::new(p)
}

/// Keeps the `m` highest-scoring tokens (ties toward the lower index), in
/// image order.
pub fn attention_prune_matrix(scores: &[f64], m: usize) -> Result<CompressionMatrix> {
    let n = scores.len();
    check_m(n, m)?;
    let mut keep = crate::compress::top_k_by_score(scores, m);
    keep.sort_unstable();
    CompressionMatrix::from_selection(&keep, n)
}

fn check_m(n: usize, m: usize) -> Result<()> {
    if n == 0 || m == 0 || m > n {
        return Err(Error::invalid(
            "reducer",
            format!("m = {} out of range for n = {}", m, n),
        ));
    }
    Ok(())
}

/// Everything a reducer might need for one episode: the image itself, the
/// turn-1 prompt attention (pruning), and generator parameters (meta).
pub struct ReducerInputs<'a> {
    pub image_tokens: &'a Tensor,
    pub attention_scores: Option<&'a [f64]>,
    pub meta_params: Option<&'a MetaGeneratorParams>,
}

/// Builds the concrete matrix for one episode; `None` means "run unreduced".
/// `episode_index` decorrelates the random reducer across episodes while
/// staying reproducible.
pub fn build_matrix(
    spec: &ReducerSpec,
    inputs: &ReducerInputs,
    episode_index: u64,
) -> Result<Option<CompressionMatrix>> {
    spec.validate()?;
    let n = inputs.image_tokens.nrows();
    let built = match spec {
        ReducerSpec::None => None,
        ReducerSpec::Random { rate, seed } => {
            let m = m_for_rate(n, *rate)?;
            Some(random_matrix(
                n,
                m,
                seed.wrapping_add(episode_index.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            )?)
        }
        ReducerSpec::Sample { rate } => Some(sample_matrix(n, m_for_rate(n, *rate)?)?),
        ReducerSpec::SpatialPool { rate, kernel } => {
            Some(spatial_pool_matrix(n, m_for_rate(n, *rate)?, *kernel)?)
        }
        ReducerSpec::AttentionPrune { rate } => {
            let scores = inputs.attention_scores.ok_or_else(|| {
                Error::invalid("reducer", "attention_prune needs prompt attention scores")
            })?;
            Some(attention_prune_matrix(scores, m_for_rate(n, *rate)?)?)
        }
        ReducerSpec::Meta { rate } => {
            let params = inputs
                .meta_params
                .ok_or_else(|| Error::invalid("reducer", "meta needs generator parameters"))?;
            Some(meta::generate(params, inputs.image_tokens, m_for_rate(n, *rate)?)?)
        }
    };
    Ok(built)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sources_of(p: &CompressionMatrix) -> Vec<usize> {
        assert!(p.is_selection());
        (0..p.m())
            .map(|i| {
                p.tensor()
                    .row(i)
                    .iter()
                    .position(|&v| v == 1.0)
                    .expect("one-hot row")
            })
            .collect()
    }

    #[test]
    fn random_matrix_keeps_distinct_sorted_sources() {
        for seed in 0..50 {
            let p = random_matrix(16, 5, seed).unwrap();
            let s = sources_of(&p);
            let mut sorted = s.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(s, sorted, "sources must be sorted and distinct");
        }
    }

    #[test]
    fn random_matrix_index_frequencies_are_uniform() {
        let (n, m) = (16, 4);
        let draws = 10_000u64;
        let mut counts = vec![0.0f64; n];
        for t in 0..draws {
            for s in sources_of(&random_matrix(n, m, t).unwrap()) {
                counts[s] += 1.0;
            }
        }
        let p = m as f64 / n as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c - mean).abs() < 3.0 * sigma,
                "index {} drawn {} times vs {} +- 3*{}",
                i,
                c,
                mean,
                sigma
            );
        }
    }

    #[test]
    fn sample_matrix_matches_hand_anchors() {
        assert_eq!(sources_of(&sample_matrix(7, 3).unwrap()), vec![0, 2, 5]);
        let every4: Vec<usize> = (0..16).map(|i| 4 * i).collect();
        assert_eq!(sources_of(&sample_matrix(64, 16).unwrap()), every4);
        // m = n degenerates to the identity.
        assert_eq!(sources_of(&sample_matrix(5, 5).unwrap()), vec![0, 1, 2, 3, 4]);
        // The first token is always kept.
        for (n, m) in [(9, 2), (31, 7), (64, 63)] {
            assert_eq!(sources_of(&sample_matrix(n, m).unwrap())[0], 0);
        }
    }

    #[test]
    fn pooling_with_unit_kernel_equals_equidistant_sampling() {
        for (n, m) in [(7, 3), (16, 4), (10, 10), (23, 6)] {
            let pool = spatial_pool_matrix(n, m, 1).unwrap();
            let samp = sample_matrix(n, m).unwrap();
            assert_eq!(pool.tensor(), samp.tensor(), "n={} m={}", n, m);
        }
    }

    #[test]
    fn pool_rows_are_uniform_over_shared_anchor_windows() {
        let p = spatial_pool_matrix(7, 3, 3).unwrap();
        // Anchors 0, 2, 4 with weight 1/3 over three entries each.
        for (i, a) in [(0usize, 0usize), (1, 2), (2, 4)] {
            for j in 0..7 {
                let expect = if j >= a && j < a + 3 { 1.0 / 3.0 } else { 0.0 };
                assert_eq!(p.tensor().at2(i, j), expect);
            }
        }
        // Kernel longer than the image clamps to the whole row.
        let wide = spatial_pool_matrix(4, 2, 9).unwrap();
        for j in 0..4 {
            assert_eq!(wide.tensor().at2(0, j), 0.25);
        }
    }

    #[test]
    fn attention_prune_keeps_top_scores_in_image_order() {
        let scores = [0.05, 0.8, 0.02, 0.4, 0.6, 0.01];
        let p = attention_prune_matrix(&scores, 3).unwrap();
        assert_eq!(sources_of(&p), vec![1, 3, 4]);
        // Ties resolve toward the lower index.
        let tied = [0.5, 0.9, 0.5, 0.5];
        let p = attention_prune_matrix(&tied, 2).unwrap();
        assert_eq!(sources_of(&p), vec![0, 1]);
    }

    #[test]
    fn reducer_specs_validate_rates_and_kernels() {
        assert!(ReducerSpec::Sample { rate: 0.0 }.validate().is_err());
        assert!(ReducerSpec::Sample { rate: 1.0 }.validate().is_err());
        assert!(ReducerSpec::Random { rate: -0.1, seed: 0 }.validate().is_err());
        assert!(ReducerSpec::SpatialPool { rate: 0.5, kernel: 0 }.validate().is_err());
        assert!(ReducerSpec::Meta { rate: 0.75 }.validate().is_ok());
        assert!(ReducerSpec::None.validate().is_ok());
    }

    #[test]
    fn reducer_spec_serde_round_trips() {
        let specs = vec![
            ReducerSpec::None,
            ReducerSpec::Random { rate: 0.75, seed: 9 },
            ReducerSpec::Sample { rate: 0.75 },
            ReducerSpec::SpatialPool { rate: 0.5, kernel: 3 },
            ReducerSpec::AttentionPrune { rate: 0.75 },
            ReducerSpec::Meta { rate: 0.75 },
        ];
        let json = serde_json::to_string(&specs).unwrap();
        let back: Vec<ReducerSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(specs, back);
        assert!(json.contains("\"kind\":\"spatial_pool\""));
    }

    #[test]
    fn build_matrix_dispatches_and_reports_missing_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let image = Tensor::from_vec(&[8, 4], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let scores: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let inputs = ReducerInputs {
            image_tokens: &image,
            attention_scores: Some(&scores),
            meta_params: None,
        };
        assert!(build_matrix(&ReducerSpec::None, &inputs, 0).unwrap().is_none());
        let p = build_matrix(&ReducerSpec::Sample { rate: 0.5 }, &inputs, 0)
            .unwrap()
            .unwrap();
        assert_eq!((p.m(), p.n()), (4, 8));
        let p = build_matrix(&ReducerSpec::AttentionPrune { rate: 0.5 }, &inputs, 0)
            .unwrap()
            .unwrap();
        assert_eq!(sources_of(&p), vec![4, 5, 6, 7]);

        let no_scores = ReducerInputs {
            image_tokens: &image,
            attention_scores: None,
            meta_params: None,
        };
        assert!(build_matrix(&ReducerSpec::AttentionPrune { rate: 0.5 }, &no_scores, 0).is_err());
        assert!(build_matrix(&ReducerSpec::Meta { rate: 0.5 }, &no_scores, 0).is_err());
    }

    #[test]
    fn random_matrices_differ_across_episode_indices_but_reproduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let image = Tensor::from_vec(
            &[12, 3],
            (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let inputs = ReducerInputs {
            image_tokens: &image,
            attention_scores: None,
            meta_params: None,
        };
        let spec = ReducerSpec::Random { rate: 0.5, seed: 7 };
        let a0 = build_matrix(&spec, &inputs, 0).unwrap().unwrap();
        let a0_again = build_matrix(&spec, &inputs, 0).unwrap().unwrap();
        let a1 = build_matrix(&spec, &inputs, 1).unwrap().unwrap();
        assert_eq!(a0.tensor(), a0_again.tensor());
        assert_ne!(a0.tensor(), a1.tensor());
    }
}
