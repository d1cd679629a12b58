//! Meta-generator training and the shared evaluation loop.
//!
//! Training minimizes, per batch,
//!
//! ```text
//! L = L_pred + alpha_entropy * L_entropy + alpha_collapse * L_collapse
//! ```
//!
//! where `L_pred` compares teacher-forced traces of the compressed dialogue
//! against frozen traces of the uncompressed one, `L_entropy` is the mean row
//! entropy of the generated matrices, and `L_collapse` is the largest column
//! mass (all three averaged over the batch). Plain SGD with optional
//! global-norm gradient clipping; every non-finite value surfaces as a
//! divergence error carrying the step index instead of a NaN panic.
//!
//! Evaluation teacher-forces the dialogue as well: each turn's answer is read
//! at its prompt position before the gold token is fed, so per-turn accuracy
//! never conflates a turn with earlier mistakes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{build_matrix, ReducerInputs, ReducerSpec};
use crate::compress::{loss_collapse, loss_entropy, loss_pred, m_for_rate, PredictionTrace};
use crate::error::{Error, Result};
use crate::meta::{stage_params, MetaGeneratorParams};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::toy::{
    prompt_attention, run_dialogue, run_dialogue_on_tape, DecodeMode, DialogueEpisode, FrozenModel,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha_entropy: f64,
    pub alpha_collapse: f64,
    /// Compression rate used to size the generated matrices.
    pub rate: f64,
    /// Shuf­fling and split seed.
    pub seed: u64,
    /// Fraction of episodes held out for checkpoint selection.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            grad_clip: Some(1e-2),
            epochs: 2,
            batch_size: 8,
            alpha_entropy: 1.0,
            alpha_collapse: 1.0,
            rate: 0.75,
            seed: 0,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "train config",
                "lr must be positive, epochs and batch_size nonzero",
            ));
        }
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::invalid(
                "train config",
                format!("rate {} must lie strictly inside (0, 1)", self.rate),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("train config", "grad_clip must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::invalid("train config", "holdout_fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

/// One optimizer step's scalars, in training order.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrainStepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_pred: f64,
    pub l_entropy: f64,
    pub l_collapse: f64,
    pub total: f64,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters with the best holdout accuracy (ties keep the earlier one).
    pub best_params: MetaGeneratorParams,
    /// Parameters after the final step.
    pub final_params: MetaGeneratorParams,
    pub steps: Vec<TrainStepRecord>,
    /// Holdout accuracy after each epoch.
    pub holdout_accuracy: Vec<f64>,
    pub best_epoch: usize,
}

/// Trains the generator on teacher-forced dialogues. Episodes are split
/// (shuffled by `cfg.seed`) into a train set and a holdout used only to pick
/// the returned checkpoint; with fewer than two episodes or a zero fraction
/// everything trains and the final parameters are also the best ones.
pub fn train_meta(
    model: &FrozenModel,
    episodes: &[DialogueEpisode],
    init: &MetaGeneratorParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.validate()?;
    if episodes.is_empty() {
        return Err(Error::invalid("train", "no episodes"));
    }
    if init.cfg.d != model.spec().d {
        return Err(Error::invalid(
            "train",
            format!("generator d = {} vs decoder d = {}", init.cfg.d, model.spec().d),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.shuffle(&mut rng);
    let holdout = if episodes.len() >= 2 && cfg.holdout_fraction > 0.0 {
        ((episodes.len() as f64 * cfg.holdout_fraction).round() as usize)
            .clamp(1, episodes.len() - 1)
    } else {
        0
    };
    let (eval_idx, train_idx) = order.split_at(holdout);
    let eval_eps: Vec<DialogueEpisode> = eval_idx.iter().map(|&i| episodes[i].clone()).collect();

    // Frozen references for the prediction loss, one flat trace per episode.
    let mut references = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let out = run_dialogue(model, ep, None, DecodeMode::Forced)?;
        references.push(PredictionTrace::concat(&out.traces));
    }

    let mut params = init.clone();
    let mut steps = Vec::new();
    let mut holdout_accuracy = Vec::new();
    let mut best: Option<(f64, MetaGeneratorParams, usize)> = None;
    let mut step = 0usize;
    let mut train_order: Vec<usize> = train_idx.to_vec();

    for epoch in 0..cfg.epochs {
        train_order.shuffle(&mut rng);
        for batch in train_order.chunks(cfg.batch_size) {
            let diverged = |e: Error| match e {
                Error::NonFinite { op } => Error::Diverged {
                    step,
                    detail: format!("non-finite value in {}", op),
                },
                other => other,
            };
            let mut tape = Tape::new();
            let staged = stage_params(&mut tape, &params, true)?;
            let mut pred_terms = Vec::with_capacity(batch.len());
            let mut ent_terms = Vec::with_capacity(batch.len());
            let mut col_terms = Vec::with_capacity(batch.len());
            for &idx in batch {
                let ep = &episodes[idx];
                let m = m_for_rate(ep.n(), cfg.rate)?;
                let image = tape.constant(ep.image_tokens.clone());
                let p = staged.generate(&mut tape, image, m).map_err(diverged)?;
                let compressed = tape.matmul(p, image).map_err(diverged)?;
                let run = run_dialogue_on_tape(&mut tape, model, compressed, ep, DecodeMode::Forced)
                    .map_err(diverged)?;
                let flat: Vec<Var> = run.turn_traces.iter().flatten().copied().collect();
                pred_terms.push(loss_pred(&mut tape, &references[idx], &flat).map_err(diverged)?);
                ent_terms.push(loss_entropy(&mut tape, p).map_err(diverged)?);
                col_terms.push(loss_collapse(&mut tape, p).map_err(diverged)?);
            }
            let mean_of = |tape: &mut Tape, terms: &[Var]| -> Result<Var> {
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = tape.add(acc, t)?;
                }
                tape.scale(acc, 1.0 / terms.len() as f64)
            };
            let l_pred = mean_of(&mut tape, &pred_terms).map_err(diverged)?;
            let l_ent = mean_of(&mut tape, &ent_terms).map_err(diverged)?;
            let l_col = mean_of(&mut tape, &col_terms).map_err(diverged)?;
            let ent_w = tape.scale(l_ent, cfg.alpha_entropy).map_err(diverged)?;
            let col_w = tape.scale(l_col, cfg.alpha_collapse).map_err(diverged)?;
            let partial = tape.add(l_pred, ent_w).map_err(diverged)?;
            let total = tape.add(partial, col_w).map_err(diverged)?;

            let record_base = (
                tape.value(l_pred).item()?,
                tape.value(l_ent).item()?,
                tape.value(l_col).item()?,
                tape.value(total).item()?,
            );
            tape.backward(total).map_err(diverged)?;

            let vars = staged.trainable();
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|&v| tape.grad(v).expect("trainable vars receive gradients").clone())
                .collect();
            let sq_sum: f64 = grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|g| g * g)
                .sum();
            let grad_norm_pre = sq_sum.sqrt();
            if !grad_norm_pre.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("non-finite gradient norm {}", grad_norm_pre),
                });
            }
            let factor = match cfg.grad_clip {
                Some(c) if grad_norm_pre > c => c / grad_norm_pre,
                _ => 1.0,
            };
            let grad_norm_post = grad_norm_pre * factor;

            let mut targets: Vec<&mut Tensor> = vec![&mut params.w_q, &mut params.w_k, &mut params.omega];
            if let Some(e) = params.e_pos.as_mut() {
                targets.push(e);
            }
            debug_assert_eq!(targets.len(), grads.len());
            for (target, grad) in targets.into_iter().zip(&grads) {
                for (w, g) in target.data_mut().iter_mut().zip(grad.data()) {
                    *w -= cfg.lr * factor * g;
                    if !w.is_finite() {
                        return Err(Error::Diverged {
                            step,
                            detail: "non-finite parameter after update".to_string(),
                        });
                    }
                }
            }

            steps.push(TrainStepRecord {
                step,
                epoch,
                l_pred: record_base.0,
                l_entropy: record_base.1,
                l_collapse: record_base.2,
                total: record_base.3,
                grad_norm_pre,
                grad_norm_post,
            });
            step += 1;
        }

        if !eval_eps.is_empty() {
            // Overflow can first surface here rather than in a batch forward
            // pass; it is still a training divergence, not an i/o-level fault.
            let summary = evaluate(
                model,
                &eval_eps,
                &ReducerSpec::Meta { rate: cfg.rate },
                Some(&params),
            )
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    step,
                    detail: format!("non-finite value in {} during holdout evaluation", op),
                },
                other => other,
            })?;
            holdout_accuracy.push(summary.avg_accuracy);
            let better = match &best {
                None => true,
                Some((acc, _, _)) => summary.avg_accuracy > *acc,
            };
            if better {
                best = Some((summary.avg_accuracy, params.clone(), epoch));
            }
        }
    }

    let (best_params, best_epoch) = match best {
        Some((_, p, e)) => (p, e),
        None => (params.clone(), cfg.epochs.saturating_sub(1)),
    };
    Ok(TrainOutcome {
        best_params,
        final_params: params,
        steps,
        holdout_accuracy,
        best_epoch,
    })
}

/// Accuracy and trace divergence of one reducer over a fixed episode set.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub reducer: String,
    pub episodes: usize,
    /// Accuracy at turn `t`, over episodes.
    pub per_turn_accuracy: Vec<f64>,
    /// Mean accuracy over all turns and episodes.
    pub avg_accuracy: f64,
    /// Mean KL of compressed traces against uncompressed ones.
    pub avg_l_pred: f64,
}

/// Teacher-forced evaluation: per turn, the answer is the argmax over classes
/// at the prompt position; the gold token is then fed regardless. The trace
/// KL compares against the uncompressed run of the same episode.
pub fn evaluate(
    model: &FrozenModel,
    episodes: &[DialogueEpisode],
    reducer: &ReducerSpec,
    meta_params: Option<&MetaGeneratorParams>,
) -> Result<EvalSummary> {
    reducer.validate()?;
    if episodes.is_empty() {
        return Err(Error::invalid("evaluate", "no episodes"));
    }
    let n_turns = episodes[0].turns.len();
    if episodes.iter().any(|ep| ep.turns.len() != n_turns) {
        return Err(Error::invalid(
            "evaluate",
            "episodes must share a turn count for per-turn accuracy",
        ));
    }
    let mut correct = vec![0usize; n_turns];
    let mut kl_sum = 0.0;
    for (idx, ep) in episodes.iter().enumerate() {
        let reference = run_dialogue(model, ep, None, DecodeMode::Forced)?;
        let scores = match reducer {
            ReducerSpec::AttentionPrune { .. } => Some(prompt_attention(model, ep)?),
            _ => None,
        };
        let inputs = ReducerInputs {
            image_tokens: &ep.image_tokens,
            attention_scores: scores.as_deref(),
            meta_params,
        };
        let matrix = build_matrix(reducer, &inputs, idx as u64)?;
        let out = match matrix {
            Some(ref p) => run_dialogue(model, ep, Some(p), DecodeMode::Forced)?,
            None => reference.clone(),
        };
        for (t, (answer, turn)) in out.answers.iter().zip(&ep.turns).enumerate() {
            if answer == &turn.gold_class {
                correct[t] += 1;
            }
        }
        kl_sum += mean_kl(&reference, &out)?;
    }
    let per_turn_accuracy: Vec<f64> = correct
        .iter()
        .map(|&c| c as f64 / episodes.len() as f64)
        .collect();
    let avg_accuracy = per_turn_accuracy.iter().sum::<f64>() / n_turns as f64;
    Ok(EvalSummary {
        reducer: reducer.name().to_string(),
        episodes: episodes.len(),
        per_turn_accuracy,
        avg_accuracy,
        avg_l_pred: kl_sum / episodes.len() as f64,
    })
}

fn mean_kl(
    reference: &crate::toy::DialogueOutcome,
    out: &crate::toy::DialogueOutcome,
) -> Result<f64> {
    let flat_ref = PredictionTrace::concat(&reference.traces);
    let flat_out = PredictionTrace::concat(&out.traces);
    let mut tape = Tape::new();
    let vars: Vec<Var> = flat_out
        .rows
        .iter()
        .map(|r| {
            let t = Tensor::from_vec(&[1, r.len()], r.clone())?;
            Ok(tape.constant(t))
        })
        .collect::<Result<_>>()?;
    let l = loss_pred(&mut tape, &flat_ref, &vars)?;
    tape.value(l).item()
}
