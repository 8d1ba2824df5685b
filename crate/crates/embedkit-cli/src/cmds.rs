//! Thin subcommand wrappers over the library operations.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use embedkit::adapt::{
    expand_first_layer_channels, latlon_caption_for, preserve_sum_mismatch,
    regression_caption_for, CaptionConfig, ConvWeight, ScalePolicy,
};
use embedkit::cluster::{compression_quality, kmeans, silhouette_score, Linkage};
use embedkit::ensemble::{compose, default_layout, search_rates, EnsembleLayout};
use embedkit::eval::{
    evaluate_task, q_mean, task_balanced_q_mean, EvaluationReport, LeaderboardMatrix,
    ProbeConfig, Task, TaskScore,
};
use embedkit::matrix::EmbeddingMatrix;
use embedkit::refine::{apply_linear_map, make_pseudolabels, train_refiner, RefinerConfig};
use embedkit::store::{load_embeddings, load_metadata_csv, save_embeddings, Manifest};
use embedkit::svd::{fit_truncated_svd, reconstruction_mse};

use crate::args;
use crate::errors::{CliError, CliResult};
use crate::provenance::ProvenanceRecord;
use crate::tasks::load_tasks;

/// Writes `<primary-with-.provenance.json>` hashing the command's inputs and
/// outputs, so any artifact can be traced back to exact input bytes.
fn write_sidecar_provenance(
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
    primary: &Path,
) -> CliResult<()> {
    let mut record = ProvenanceRecord::new(seed);
    for p in inputs {
        record.record_input(p)?;
    }
    for p in outputs {
        record.record_output(p)?;
    }
    record.write(with_extension(primary, "provenance.json"))
}

#[derive(Serialize)]
struct CompressQuality {
    model_id: String,
    input_dim: usize,
    k: usize,
    seed: u64,
    mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    silhouette: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    silhouette_baseline: Option<f64>,
}

pub fn cmd_compress(a: args::CompressArgs) -> CliResult<()> {
    let mut x = load_embeddings(&a.input)?;
    if a.normalize_input {
        x = x.normalize_rows_l2();
    }
    let model = fit_truncated_svd(&x, a.k, a.seed)?;
    let z = model.transform(&x)?;
    let x_hat = model.reconstruct(&z)?;
    let mse = reconstruction_mse(&x, &x_hat)?;

    save_embeddings(&z, &a.output)?;
    let model_path = a
        .model_out
        .unwrap_or_else(|| with_extension(&a.output, "svd1"));
    model.save(&model_path)?;

    let (silhouette, silhouette_baseline) = match a.clusters {
        Some(k_clusters) => {
            let base = kmeans(&x, k_clusters, a.seed, 100, 1e-7)?;
            let baseline = silhouette_score(&x, &base.assignment.labels)?;
            let km = kmeans(&z, k_clusters, a.seed, 100, 1e-7)?;
            let s = silhouette_score(&z, &km.assignment.labels)?;
            (Some(s), Some(baseline))
        }
        None => (None, None),
    };
    let record = CompressQuality {
        model_id: x.model_id().to_string(),
        input_dim: x.n_cols(),
        k: a.k,
        seed: a.seed,
        mse,
        silhouette,
        silhouette_baseline,
    };
    let quality_path = a
        .quality_out
        .unwrap_or_else(|| with_extension(&a.output, "quality.json"));
    std::fs::write(&quality_path, serde_json::to_string_pretty(&record)?)?;
    write_sidecar_provenance(
        Some(a.seed),
        &[&a.input],
        &[&a.output, &model_path, &quality_path],
        &a.output,
    )
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut p = path.to_path_buf();
    p.set_extension(ext);
    p
}

pub fn cmd_quality(a: args::QualityArgs) -> CliResult<()> {
    let x = load_embeddings(&a.input)?;
    let report = compression_quality(&x, &a.dims, a.clusters, a.seed)?;
    std::fs::write(&a.output, serde_json::to_string_pretty(&report)?)?;
    write_sidecar_provenance(Some(a.seed), &[&a.input], &[&a.output], &a.output)
}

pub fn cmd_search(a: args::SearchArgs) -> CliResult<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let mut embeddings = BTreeMap::new();
    let mut input_files = vec![a.manifest.clone(), a.candidates.clone()];
    for entry in &manifest.entries {
        let path = manifest.entry_path(entry);
        let m = load_embeddings(&path)?;
        embeddings.insert(entry.slot_key(), m);
        input_files.push(path);
    }
    let text = std::fs::read_to_string(&a.candidates)?;
    let candidates: BTreeMap<String, Vec<usize>> = serde_json::from_str(&text)
        .map_err(|e| CliError::new("invalid_config", format!("candidates: {e}")))?;
    let plan = search_rates(
        &embeddings,
        &candidates,
        a.budget,
        a.clusters,
        a.seed,
        a.mse_weight,
    )?;
    std::fs::write(&a.output, serde_json::to_string_pretty(&plan)?)?;
    let inputs: Vec<&Path> = input_files.iter().map(PathBuf::as_path).collect();
    write_sidecar_provenance(Some(a.seed), &inputs, &[&a.output], &a.output)
}

#[derive(Serialize)]
struct RefineSummary {
    model_id: String,
    n_rows_trained: usize,
    n_pseudo_clusters: usize,
    epochs: usize,
    final_loss: f64,
    map_sv_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    holdout_loss: Option<f64>,
}

pub fn cmd_refine(a: args::RefineArgs) -> CliResult<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let mut seasons = Vec::new();
    let mut input_files = vec![a.manifest.clone()];
    for season in crate::pipeline::SEASON_ORDER {
        let entry = manifest
            .entries
            .iter()
            .find(|e| e.model_id == a.model && e.season.as_deref() == Some(season))
            .ok_or_else(|| {
                CliError::new(
                    "invalid_config",
                    format!("manifest lacks {} season {season:?}", a.model),
                )
            })?;
        let path = manifest.entry_path(entry);
        seasons.push(load_embeddings(&path)?);
        input_files.push(path);
    }

    let linkage = Linkage::from_str(&a.linkage)?;
    let pseudo = make_pseudolabels(&seasons, a.clusters, linkage)?;

    // Optional holdout: trains on the head split, reports loss on the tail.
    let n = seasons[0].n_rows();
    let (train_seasons, train_labels, holdout) = match a.holdout {
        Some(frac) if frac > 0.0 => {
            if !(0.0..1.0).contains(&frac) {
                return Err(CliError::new("invalid_config", "holdout must be in [0, 1)"));
            }
            let n_hold = ((n as f64) * frac).floor() as usize;
            let n_train = n - n_hold;
            if n_train < 2 || n_hold == 0 {
                return Err(CliError::new(
                    "invalid_config",
                    format!("holdout {frac} leaves {n_train} train / {n_hold} holdout rows"),
                ));
            }
            let split = |s: &EmbeddingMatrix, from: usize, to: usize| {
                EmbeddingMatrix::new(
                    s.model_id(),
                    to - from,
                    s.n_cols(),
                    s.data()[from * s.n_cols()..to * s.n_cols()].to_vec(),
                )
                .map_err(CliError::from)
            };
            let train: Vec<EmbeddingMatrix> = seasons
                .iter()
                .map(|s| split(s, 0, n_train))
                .collect::<CliResult<_>>()?;
            let hold: Vec<EmbeddingMatrix> = seasons
                .iter()
                .map(|s| split(s, n_train, n))
                .collect::<CliResult<_>>()?;
            let hold_labels = pseudo.labels[n_train..].to_vec();
            (train, pseudo.labels[..n_train].to_vec(), Some((hold, hold_labels)))
        }
        _ => (seasons.clone(), pseudo.labels.clone(), None),
    };

    let cfg = RefinerConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        l2_penalty: a.l2,
        seed: a.seed,
        n_pseudo_clusters: a.clusters,
        momentum: a.momentum,
        freeze_map: false,
    };
    let state = train_refiner(&train_seasons, &train_labels, &cfg)?;

    state.map.save(&a.map_out)?;
    let mut f = std::fs::File::create(&a.trace_out)?;
    for (epoch, loss) in state.loss_trace.iter().enumerate() {
        writeln!(f, "{}", serde_json::json!({"epoch": epoch, "loss": loss}))?;
    }

    let holdout_loss = match &holdout {
        Some((hold_seasons, hold_labels)) => {
            let (loss, _) = embedkit::refine::loss_and_grads(
                &state.map,
                &state.probe,
                hold_seasons,
                hold_labels,
                a.l2,
            )?;
            Some(loss)
        }
        None => None,
    };

    if let Some(dir) = &a.apply_out_dir {
        std::fs::create_dir_all(dir)?;
        for (season, name) in seasons.iter().zip(crate::pipeline::SEASON_ORDER) {
            let mapped = apply_linear_map(&state.map, season)?;
            save_embeddings(&mapped, dir.join(format!("{}_{name}.emb", a.model)))?;
        }
    }

    let summary = RefineSummary {
        model_id: a.model,
        n_rows_trained: train_seasons[0].n_rows(),
        n_pseudo_clusters: a.clusters,
        epochs: a.epochs,
        final_loss: *state.loss_trace.last().unwrap_or(&f64::NAN),
        map_sv_ratio: state.map_sv_ratio,
        holdout_loss,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    let inputs: Vec<&Path> = input_files.iter().map(PathBuf::as_path).collect();
    write_sidecar_provenance(
        Some(a.seed),
        &inputs,
        &[&a.map_out, &a.trace_out],
        &a.map_out,
    )
}

pub fn cmd_compose(a: args::ComposeArgs) -> CliResult<()> {
    let layout = resolve_layout_arg(&a.layout)?;
    let manifest = Manifest::load(&a.manifest)?;
    let mut inputs = BTreeMap::new();
    let mut input_files = vec![a.manifest.clone()];
    for entry in &manifest.entries {
        let path = manifest.entry_path(entry);
        let mut m = load_embeddings(&path)?;
        if a.normalize_slots {
            m = m.normalize_rows_l2();
        }
        inputs.insert(entry.slot_key(), m);
        input_files.push(path);
    }
    let out = compose(&layout, &inputs)?;
    let layout_json = serde_json::to_value(&layout)?;
    embedkit::store::save_embeddings_with_layout(&out, &a.output, layout_json)?;
    let inputs_ref: Vec<&Path> = input_files.iter().map(PathBuf::as_path).collect();
    write_sidecar_provenance(None, &inputs_ref, &[&a.output], &a.output)
}

fn resolve_layout_arg(arg: &str) -> CliResult<EnsembleLayout> {
    if arg == "table1" {
        return Ok(default_layout());
    }
    let text = std::fs::read_to_string(arg)
        .map_err(|e| CliError::new("invalid_config", format!("layout {arg}: {e}")))?;
    #[derive(Deserialize)]
    struct LayoutFile {
        slots: Vec<embedkit::ensemble::Slot>,
    }
    let parsed: LayoutFile = serde_json::from_str(&text)
        .map_err(|e| CliError::new("invalid_config", format!("layout {arg}: {e}")))?;
    EnsembleLayout::new(parsed.slots).map_err(CliError::from)
}

/// Shared by the evaluate subcommand and the pipeline's evaluate stage.
pub fn evaluate_tasks(
    tasks: &[Task],
    probe: &ProbeConfig,
    leaderboard: Option<&LeaderboardMatrix>,
    team_name: &str,
) -> CliResult<EvaluationReport> {
    let mut task_scores = Vec::with_capacity(tasks.len());
    for task in tasks {
        let score = evaluate_task(task, probe)?;
        task_scores.push(TaskScore {
            name: task.name.clone(),
            kind: task.kind,
            score,
        });
    }
    let scores: Vec<f64> = task_scores.iter().map(|t| t.score).collect();
    let mean = q_mean(&scores)?;

    let (balanced, weights) = match leaderboard {
        Some(board) => {
            let our_tasks: Vec<&str> = task_scores.iter().map(|t| t.name.as_str()).collect();
            let board_tasks: Vec<&str> = board.tasks.iter().map(String::as_str).collect();
            if our_tasks != board_tasks {
                return Err(CliError::new(
                    "invalid_config",
                    format!("leaderboard tasks {board_tasks:?} do not match evaluated tasks {our_tasks:?}"),
                ));
            }
            let mut augmented = board.clone();
            augmented.teams.push(team_name.to_string());
            augmented.scores.extend(scores.iter().copied());
            let result = task_balanced_q_mean(&augmented)?;
            let ours = *result.team_scores.last().unwrap();
            (Some(ours), Some(result.weights))
        }
        None => (None, None),
    };

    Ok(EvaluationReport {
        tasks: task_scores,
        q_mean: mean,
        task_balanced_q_mean: balanced,
        weights,
    })
}

pub fn cmd_evaluate(a: args::EvaluateArgs) -> CliResult<()> {
    let loaded = load_tasks(&a.tasks, &BTreeMap::new())?;
    let mut input_files = loaded.files.clone();
    let board = match &a.leaderboard {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let board: LeaderboardMatrix = serde_json::from_str(&text)
                .map_err(|e| CliError::new("invalid_config", format!("leaderboard: {e}")))?;
            board.validate()?;
            input_files.push(path.clone());
            Some(board)
        }
        None => None,
    };
    let probe = ProbeConfig {
        ridge: a.ridge,
        iters: a.iters,
        lr: a.lr,
        seed: a.seed,
    };
    let report = evaluate_tasks(&loaded.tasks, &probe, board.as_ref(), &a.team_name)?;
    std::fs::write(&a.output, serde_json::to_string_pretty(&report)?)?;
    let inputs: Vec<&Path> = input_files.iter().map(PathBuf::as_path).collect();
    write_sidecar_provenance(Some(a.seed), &inputs, &[&a.output], &a.output)
}

#[derive(Serialize)]
struct AdaptSummary {
    in_channels: usize,
    target_in: usize,
    policy: ScalePolicy,
    /// Worst-case relative pre-activation error on channel-constant input
    /// under preserve_sum (0 for exact multiples).
    preserve_sum_mismatch: f64,
}

pub fn cmd_adapt(a: args::AdaptArgs) -> CliResult<()> {
    let policy = match a.policy.as_str() {
        "none" => ScalePolicy::None,
        "preserve_sum" => ScalePolicy::PreserveSum,
        other => {
            return Err(CliError::new(
                "invalid_config",
                format!("unknown policy {other:?} (none | preserve_sum)"),
            ))
        }
    };
    let w = ConvWeight::load(&a.input)?;
    let expanded = expand_first_layer_channels(&w, a.target_in, policy)?;
    expanded.save(&a.output)?;
    let summary = AdaptSummary {
        in_channels: w.in_channels,
        target_in: a.target_in,
        policy,
        preserve_sum_mismatch: preserve_sum_mismatch(w.in_channels, a.target_in),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    write_sidecar_provenance(None, &[&a.input], &[&a.output], &a.output)
}

pub fn cmd_caption(a: args::CaptionArgs) -> CliResult<()> {
    let rows = load_metadata_csv(&a.metadata)?;
    let cfg = CaptionConfig {
        verbatim_spelling: !a.corrected,
        decimal_places: a.decimals,
    };
    cfg.validate()?;
    let mut out = String::new();
    for meta in &rows {
        let line = match a.kind.as_str() {
            "latlon" => latlon_caption_for(meta, &cfg)?,
            "regression" => regression_caption_for(meta, &cfg)?,
            other => {
                return Err(CliError::new(
                    "invalid_config",
                    format!("unknown caption kind {other:?} (latlon | regression)"),
                ))
            }
        };
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(&a.output, out)?;
    write_sidecar_provenance(None, &[&a.metadata], &[&a.output], &a.output)
}

pub fn cmd_pipeline(a: args::PipelineArgs) -> CliResult<()> {
    let outputs = crate::pipeline::run_pipeline(&a.config, a.seed, a.out_dir)?;
    println!(
        "{}",
        serde_json::json!({
            "out_dir": outputs.out_dir,
            "ensemble": outputs.ensemble,
            "plan": outputs.plan,
            "provenance": outputs.provenance,
            "map": outputs.map,
            "trace": outputs.trace,
            "report": outputs.report,
        })
    );
    Ok(())
}
