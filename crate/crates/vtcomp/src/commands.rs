//! Command implementations behind the CLI: dataset generation, training,
//! evaluation sweeps, fixed-matrix studies, and cost reports.
//!
//! Every command writes its artifacts plus a JSON run manifest (command,
//! engine version, config hash, effective seed, output list). Nothing here
//! reads clocks or ambient entropy, so rerunning a command with the same
//! config yields byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::baselines::ReducerSpec;
use crate::compress::{retained_token_analysis, train_fixed_matrix};
use crate::config::{derive_seed, LoadedConfig};
use crate::cost::{estimate_cost, measure_toy_runtime, CostReport, ModelDims, RuntimeReport};
use crate::error::{Error, Result};
use crate::meta::{init_params, load_checkpoint, save_checkpoint, MetaGeneratorParams};
use crate::toy::{
    build_patch_recall_model, gen_episodes, load_episodes, save_episodes, ClassLayout,
    DialogueEpisode, EpisodeGenConfig, FrozenModel,
};
use crate::trainer::{evaluate, train_meta, EvalSummary};
use crate::ENGINE_VERSION;

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    engine_version: &'a str,
    config_sha256: &'a str,
    seed: u64,
    outputs: Vec<String>,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    loaded: &LoadedConfig,
    seed: u64,
    outputs: &[&Path],
) -> Result<PathBuf> {
    let names = outputs
        .iter()
        .map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string())
        })
        .collect();
    let manifest = RunManifest {
        command,
        engine_version: ENGINE_VERSION,
        config_sha256: &loaded.sha256,
        seed,
        outputs: names,
    };
    let path = out_dir.join(format!("{}_manifest.json", command.replace('-', "_")));
    write_json(&path, &manifest)?;
    Ok(path)
}

fn require_dataset(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "dataset not found at {}; run gen-data first",
            path.display()
        )));
    }
    Ok(())
}

/// Generates the episode dataset and a manifest with a per-resolution
/// histogram. Idempotent for a fixed config.
pub fn cmd_gen_data(loaded: &LoadedConfig, out_dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    let cfg = &loaded.config;
    let spec = cfg.model.to_spec();
    spec.validate()?;
    let gen_cfg = cfg.dataset()?.to_gen_config(seed);
    let episodes = gen_episodes(&spec, &gen_cfg)?;
    let data_path = cfg.dataset()?.file_path(out_dir);
    if let Some(parent) = data_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_episodes(&data_path, &spec, &gen_cfg, &episodes)?;

    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for ep in &episodes {
        *histogram.entry(ep.n()).or_insert(0) += 1;
    }
    #[derive(Serialize)]
    struct GenSummary {
        episodes: usize,
        n_turns: usize,
        classes: usize,
        dataset_seed: u64,
        resolution_histogram: BTreeMap<usize, usize>,
    }
    let summary_path = out_dir.join("gen_summary.json");
    write_json(
        &summary_path,
        &GenSummary {
            episodes: episodes.len(),
            n_turns: gen_cfg.n_turns,
            classes: spec.classes,
            dataset_seed: gen_cfg.seed,
            resolution_histogram: histogram,
        },
    )?;
    let manifest = write_manifest(out_dir, "gen-data", loaded, seed, &[&data_path, &summary_path])?;
    Ok(vec![data_path, summary_path, manifest])
}

/// Formats a float for CSV cells; shortest round-trip representation.
fn cell(v: f64) -> String {
    format!("{}", v)
}

/// Trains the matrix generator and writes final/best checkpoints, per-step
/// CSV metrics, and a JSON summary carrying the exact hyperparameters.
pub fn cmd_train(loaded: &LoadedConfig, out_dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    let cfg = &loaded.config;
    let spec = cfg.model.to_spec();
    spec.validate()?;
    let model = build_patch_recall_model(&spec, cfg.model.seed(seed))?;
    let data_path = cfg.dataset()?.file_path(out_dir);
    require_dataset(&data_path)?;
    let (_, episodes) = load_episodes(&data_path)?;

    let meta_cfg = cfg.meta.to_config(spec.d);
    let init = init_params(&meta_cfg, cfg.meta.seed(seed))?;
    let train_cfg = cfg.train.to_config(seed);
    let outcome = train_meta(&model, &episodes, &init, &train_cfg)?;

    let final_path = out_dir.join("checkpoint_final.bin");
    let best_path = out_dir.join("checkpoint_best.bin");
    if let Some(parent) = final_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_checkpoint(&final_path, &outcome.final_params)?;
    save_checkpoint(&best_path, &outcome.best_params)?;

    let mut csv = String::from(
        "step,epoch,l_pred,l_entropy,l_collapse,total,grad_norm_pre,grad_norm_post\n",
    );
    for s in &outcome.steps {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            s.step,
            s.epoch,
            cell(s.l_pred),
            cell(s.l_entropy),
            cell(s.l_collapse),
            cell(s.total),
            cell(s.grad_norm_pre),
            cell(s.grad_norm_post)
        )
        .expect("string writes cannot fail");
    }
    let metrics_path = out_dir.join("train_metrics.csv");
    write_bytes(&metrics_path, csv.as_bytes())?;

    #[derive(Serialize)]
    struct TrainSummary<'a> {
        config_sha256: &'a str,
        lr: f64,
        grad_clip: Option<f64>,
        epochs: usize,
        batch_size: usize,
        alpha_entropy: f64,
        alpha_collapse: f64,
        rate: f64,
        holdout_fraction: f64,
        train_seed: u64,
        meta_init_seed: u64,
        generator_params: usize,
        steps: usize,
        holdout_accuracy: &'a [f64],
        best_epoch: usize,
    }
    let summary_path = out_dir.join("train_summary.json");
    write_json(
        &summary_path,
        &TrainSummary {
            config_sha256: &loaded.sha256,
            lr: train_cfg.lr,
            grad_clip: train_cfg.grad_clip,
            epochs: train_cfg.epochs,
            batch_size: train_cfg.batch_size,
            alpha_entropy: train_cfg.alpha_entropy,
            alpha_collapse: train_cfg.alpha_collapse,
            rate: train_cfg.rate,
            holdout_fraction: train_cfg.holdout_fraction,
            train_seed: train_cfg.seed,
            meta_init_seed: cfg.meta.seed(seed),
            generator_params: crate::meta::count_params(&meta_cfg),
            steps: outcome.steps.len(),
            holdout_accuracy: &outcome.holdout_accuracy,
            best_epoch: outcome.best_epoch,
        },
    )?;
    let manifest = write_manifest(
        out_dir,
        "train",
        loaded,
        seed,
        &[&final_path, &best_path, &metrics_path, &summary_path],
    )?;
    Ok(vec![final_path, best_path, metrics_path, summary_path, manifest])
}

/// Rewrites a reducer for one sweep cell: the swept rate replaces the
/// configured one, and stochastic reducers fold in the evaluation seed.
fn retarget(spec: &ReducerSpec, rate: Option<f64>, eval_seed: u64) -> ReducerSpec {
    let mix = |base: u64| base.wrapping_add(eval_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    match *spec {
        ReducerSpec::None => ReducerSpec::None,
        ReducerSpec::Random { rate: r, seed } => ReducerSpec::Random {
            rate: rate.unwrap_or(r),
            seed: mix(seed),
        },
        ReducerSpec::Sample { rate: r } => ReducerSpec::Sample {
            rate: rate.unwrap_or(r),
        },
        ReducerSpec::SpatialPool { rate: r, kernel } => ReducerSpec::SpatialPool {
            rate: rate.unwrap_or(r),
            kernel,
        },
        ReducerSpec::AttentionPrune { rate: r } => ReducerSpec::AttentionPrune {
            rate: rate.unwrap_or(r),
        },
        ReducerSpec::Meta { rate: r } => ReducerSpec::Meta {
            rate: rate.unwrap_or(r),
        },
    }
}

/// One row of the evaluation table.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub method: String,
    pub rate: f64,
    pub seed: u64,
    pub summary: EvalSummary,
}

/// Evaluates every configured reducer at every swept rate and seed;
/// emits `eval_results.csv` with one row per (method, rate, seed) cell.
pub fn cmd_eval(
    loaded: &LoadedConfig,
    out_dir: &Path,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let cfg = &loaded.config;
    let spec = cfg.model.to_spec();
    spec.validate()?;
    let model = build_patch_recall_model(&spec, cfg.model.seed(seed))?;
    let data_path = cfg.dataset()?.file_path(out_dir);
    require_dataset(&data_path)?;
    let (meta_file, episodes) = load_episodes(&data_path)?;
    if cfg.reducers.is_empty() {
        return Err(Error::Config("config lists no reducers to evaluate".to_string()));
    }

    let needs_meta = cfg.reducers.iter().any(|r| matches!(r, ReducerSpec::Meta { .. }));
    let meta_params: Option<MetaGeneratorParams> = if needs_meta {
        let default_path = out_dir.join("checkpoint_best.bin");
        let path = checkpoint.unwrap_or(&default_path);
        if !path.exists() {
            return Err(Error::Config(format!(
                "meta reducer listed but no checkpoint at {}; pass --checkpoint or train first",
                path.display()
            )));
        }
        let params = load_checkpoint(path)?;
        if params.cfg.d != spec.d {
            return Err(Error::Config(format!(
                "checkpoint generator width {} does not match model d={}",
                params.cfg.d, spec.d
            )));
        }
        Some(params)
    } else {
        None
    };

    let rates: Vec<Option<f64>> = if cfg.eval.rates.is_empty() {
        vec![None]
    } else {
        cfg.eval.rates.iter().copied().map(Some).collect()
    };
    let seeds = cfg.eval.seeds(seed);

    let mut rows: Vec<EvalRow> = Vec::new();
    for &eval_seed in &seeds {
        for rate in &rates {
            for reducer in &cfg.reducers {
                let cell_spec = retarget(reducer, *rate, eval_seed);
                cell_spec.validate()?;
                let summary = evaluate(&model, &episodes, &cell_spec, meta_params.as_ref())?;
                rows.push(EvalRow {
                    method: cell_spec.name().to_string(),
                    rate: rate.or(cell_spec.rate()).unwrap_or(0.0),
                    seed: eval_seed,
                    summary,
                });
            }
        }
    }

    let n_turns = meta_file.n_turns;
    let mut csv = String::from("method,rate,seed");
    for t in 1..=n_turns {
        write!(csv, ",acc_{}", t).expect("string writes cannot fail");
    }
    csv.push_str(",avg,avg_l_pred\n");
    for row in &rows {
        write!(csv, "{},{},{}", row.method, cell(row.rate), row.seed)
            .expect("string writes cannot fail");
        for acc in &row.summary.per_turn_accuracy {
            write!(csv, ",{}", cell(*acc)).expect("string writes cannot fail");
        }
        writeln!(
            csv,
            ",{},{}",
            cell(row.summary.avg_accuracy),
            cell(row.summary.avg_l_pred)
        )
        .expect("string writes cannot fail");
    }
    let csv_path = out_dir.join("eval_results.csv");
    write_bytes(&csv_path, csv.as_bytes())?;
    let json_path = out_dir.join("eval_results.json");
    write_json(&json_path, &rows)?;
    let manifest = write_manifest(out_dir, "eval", loaded, seed, &[&csv_path, &json_path])?;
    Ok(vec![csv_path, json_path, manifest])
}

/// Optimizes one episode's fixed matrix, then compares its retained tokens
/// with the decoder's own prompt-attention ranking.
pub fn cmd_fixed_matrix(loaded: &LoadedConfig, out_dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    let cfg = &loaded.config;
    let spec = cfg.model.to_spec();
    spec.validate()?;
    let model = build_patch_recall_model(&spec, cfg.model.seed(seed))?;
    let data_path = cfg.dataset()?.file_path(out_dir);
    require_dataset(&data_path)?;
    let (_, episodes) = load_episodes(&data_path)?;
    let section = cfg.fixed_matrix()?;
    let index = section.episode_index.unwrap_or(0);
    if index >= episodes.len() {
        return Err(Error::invalid(
            "fixed-matrix",
            format!("episode index {} out of range ({} episodes)", index, episodes.len()),
        ));
    }
    let episode = &episodes[index];
    let fm_cfg = section.to_config(seed);
    let result = train_fixed_matrix(&model, episode, &fm_cfg)?;
    let scores = crate::toy::prompt_attention(&model, episode)?;
    let overlap = retained_token_analysis(&result.matrix, &scores)?;

    #[derive(Serialize)]
    struct MatrixFile {
        m: usize,
        n: usize,
        episode_index: usize,
        rows: Vec<Vec<f64>>,
    }
    let p = result.matrix.tensor();
    let matrix_path = out_dir.join("fixed_matrix.json");
    write_json(
        &matrix_path,
        &MatrixFile {
            m: result.matrix.m(),
            n: result.matrix.n(),
            episode_index: index,
            rows: (0..result.matrix.m()).map(|i| p.row(i).to_vec()).collect(),
        },
    )?;

    let mut csv = String::from("epoch,loss,l_pred,l_entropy\n");
    for (epoch, h) in result.history.iter().enumerate() {
        writeln!(
            csv,
            "{},{},{},{}",
            epoch,
            cell(h.loss),
            cell(h.l_pred),
            cell(h.l_entropy)
        )
        .expect("string writes cannot fail");
    }
    let history_path = out_dir.join("fixed_matrix_history.csv");
    write_bytes(&history_path, csv.as_bytes())?;

    let overlap_path = out_dir.join("fixed_matrix_overlap.json");
    write_json(&overlap_path, &overlap)?;
    let manifest = write_manifest(
        out_dir,
        "fixed-matrix",
        loaded,
        seed,
        &[&matrix_path, &history_path, &overlap_path],
    )?;
    Ok(vec![matrix_path, history_path, overlap_path, manifest])
}

#[derive(Debug, Serialize)]
pub struct CostSweepRow {
    pub rate: f64,
    pub report: CostReport,
}

fn cost_csv(rows: &[CostSweepRow]) -> String {
    let mut csv = String::from(
        "rate,m_visual,prefill_tokens,prefill_attn_score_flops,prefill_attn_mix_flops,\
         prefill_linear_flops,prefill_flops,decode_flops,total_flops,kv_memory_bytes,\
         context_len_final\n",
    );
    for row in rows {
        let r = &row.report;
        let decode: u128 = r.per_turn_decode_flops.iter().sum();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            cell(row.rate),
            r.m_visual,
            r.prefill_tokens,
            r.prefill_attn_score_flops,
            r.prefill_attn_mix_flops,
            r.prefill_linear_flops,
            r.prefill_flops,
            decode,
            r.total_flops,
            r.kv_memory_bytes,
            r.context_len_final
        )
        .expect("string writes cannot fail");
    }
    csv
}

/// Sweeps reduction rates through the analytic cost model; optionally also
/// reports the 7B-class calibration dims and a toy wall-clock comparison.
pub fn cmd_cost(loaded: &LoadedConfig, out_dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    let cfg = &loaded.config;
    let section = cfg.cost()?;
    let dims = section.dims();
    dims.validate()?;

    let sweep = |dims: &ModelDims| -> Result<Vec<CostSweepRow>> {
        section
            .rates
            .iter()
            .map(|&rate| {
                Ok(CostSweepRow {
                    rate,
                    report: estimate_cost(
                        dims,
                        section.n_visual,
                        section.n_text_per_turn,
                        section.answer_len,
                        section.turns,
                        rate,
                    )?,
                })
            })
            .collect()
    };

    let rows = sweep(&dims)?;
    let json_path = out_dir.join("cost_report.json");
    write_json(&json_path, &rows)?;
    let csv_path = out_dir.join("cost_report.csv");
    write_bytes(&csv_path, cost_csv(&rows).as_bytes())?;
    let mut outputs = vec![json_path.clone(), csv_path.clone()];
    let mut manifest_outputs: Vec<PathBuf> = vec![json_path, csv_path];

    if section.calibration_7b {
        let calib = sweep(&ModelDims::calibration_7b())?;
        let calib_path = out_dir.join("cost_calibration_7b.json");
        write_json(&calib_path, &calib)?;
        outputs.push(calib_path.clone());
        manifest_outputs.push(calib_path);
    }

    if let Some(toy) = &section.toy_runtime {
        let spec = cfg.model.to_spec();
        spec.validate()?;
        let model = build_patch_recall_model(&spec, cfg.model.seed(seed))?;
        let episodes = gen_episodes(
            &spec,
            &EpisodeGenConfig {
                n_tokens: vec![toy.n_tokens],
                n_turns: toy.n_turns,
                count: 1,
                seed: derive_seed(seed, "toy_runtime"),
                layout: ClassLayout::default(),
            },
        )?;
        let report = measure_runtime_arm(&model, &episodes[0], toy.rate, toy.repeats.unwrap_or(5))?;
        let runtime_path = out_dir.join("cost_toy_runtime.json");
        write_json(&runtime_path, &report)?;
        outputs.push(runtime_path.clone());
        manifest_outputs.push(runtime_path);
    }

    let manifest_refs: Vec<&Path> = manifest_outputs.iter().map(|p| p.as_path()).collect();
    let manifest = write_manifest(out_dir, "cost", loaded, seed, &manifest_refs)?;
    outputs.push(manifest);
    Ok(outputs)
}

fn measure_runtime_arm(
    model: &FrozenModel,
    episode: &DialogueEpisode,
    rate: f64,
    repeats: usize,
) -> Result<RuntimeReport> {
    measure_toy_runtime(model, episode, &ReducerSpec::Sample { rate }, None, repeats)
}

/// Maps an error to the CLI exit code: 2 for configuration problems, 3 for
/// numerical divergence, 1 otherwise.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::InvalidArgument { .. }
        | Error::Format { .. }
        | Error::Shape { .. } => 2,
        Error::Diverged { .. } | Error::NonFinite { .. } => 3,
        Error::Io { .. } => 1,
    }
}
