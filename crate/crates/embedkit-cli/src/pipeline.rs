//! End-to-end pipeline: load the manifest, refine the seasonal model,
//! compress every slot to its target width, compose the fixed-width vector,
//! and emit plan + provenance records. The first failing stage aborts with a
//! stage-tagged error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use embedkit::ensemble::{compose, search_rates, EnsembleLayout, Slot};
use embedkit::matrix::EmbeddingMatrix;
use embedkit::refine::{apply_linear_map, make_pseudolabels, train_refiner};
use embedkit::store::{load_embeddings, save_embeddings_with_layout, Manifest};
use embedkit::svd::fit_truncated_svd;

use crate::config::{load_pipeline_config, LoadedConfig};
use crate::errors::{stage_err, CliError, CliResult};
use crate::provenance::{stage_seed, ProvenanceRecord};
use crate::tasks::load_tasks;

pub const SEASON_ORDER: [&str; 4] = ["spring", "summer", "fall", "winter"];

#[derive(Debug, Serialize)]
pub struct SlotRecord {
    pub model_id: String,
    pub native_dim: usize,
    pub target_dim: usize,
    /// True when the native width already equals the slot width and the raw
    /// (possibly refined) embedding was slotted without projection.
    pub bypassed: bool,
    pub mse: f64,
    pub svd_seed: u64,
}

#[derive(Debug, Serialize)]
pub struct RefineRecord {
    pub model_id: String,
    pub n_pseudo_clusters: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub map_sv_ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct PlanRecord {
    pub layout: EnsembleLayout,
    pub slots: Vec<SlotRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine: Option<RefineRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search: Option<embedkit::ensemble::CompressionPlan>,
}

#[derive(Debug)]
pub struct PipelineOutputs {
    pub out_dir: PathBuf,
    pub ensemble: PathBuf,
    pub plan: PathBuf,
    pub provenance: PathBuf,
    pub map: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

pub fn run_pipeline(
    config_path: &Path,
    seed_override: Option<u64>,
    out_dir_override: Option<PathBuf>,
) -> CliResult<PipelineOutputs> {
    // -- config ----------------------------------------------------------
    let loaded = load_pipeline_config(config_path).map_err(|e| e.with_stage("config"))?;
    let cfg = &loaded.config;
    let seed = seed_override.or(cfg.seed).ok_or_else(|| {
        CliError::new("invalid_config", "seed required (config \"seed\" or --seed)")
            .with_stage("config")
    })?;
    let out_dir = resolve_out_dir(&loaded, out_dir_override).map_err(|e| e.with_stage("config"))?;
    std::fs::create_dir_all(&out_dir).map_err(stage_err("config"))?;
    let base_layout = cfg.layout.resolve().map_err(|e| e.with_stage("config"))?;

    let mut provenance = ProvenanceRecord::new(seed);
    provenance.record_input(&loaded.config_path).map_err(|e| e.with_stage("config"))?;

    // -- load ------------------------------------------------------------
    let manifest_path = loaded.manifest_path();
    let manifest = Manifest::load(&manifest_path).map_err(stage_err("load"))?;
    provenance.record_input(&manifest_path).map_err(|e| e.with_stage("load"))?;

    let mut slot_inputs: BTreeMap<String, EmbeddingMatrix> = BTreeMap::new();
    for entry in &manifest.entries {
        let path = manifest.entry_path(entry);
        let m = load_embeddings(&path).map_err(stage_err("load"))?;
        provenance.record_input(&path).map_err(|e| e.with_stage("load"))?;
        slot_inputs.insert(entry.slot_key(), m);
    }
    check_row_alignment(&slot_inputs).map_err(|e| e.with_stage("load"))?;
    for slot in &base_layout.slots {
        if !slot_inputs.contains_key(&slot.model_id) {
            return Err(CliError::from(embedkit::Error::MissingSlot(slot.model_id.clone()))
                .with_stage("load"));
        }
    }

    // -- refine ----------------------------------------------------------
    let mut map_path = None;
    let mut trace_path = None;
    let mut refine_record = None;
    if let Some(refine_model) = &cfg.refine_model {
        let season_keys: Vec<String> = SEASON_ORDER
            .iter()
            .map(|s| format!("{refine_model}_{s}"))
            .collect();
        let available = season_keys.iter().filter(|k| slot_inputs.contains_key(*k)).count();
        if available > 0 {
            if available != 4 {
                return Err(CliError::new(
                    "invalid_config",
                    format!(
                        "model {refine_model:?} has {available} of 4 season entries \
                         (need spring, summer, fall, winter)"
                    ),
                )
                .with_stage("refine"));
            }
            let seasons: Vec<EmbeddingMatrix> = season_keys
                .iter()
                .map(|k| slot_inputs[k].clone())
                .collect();
            let refine_seed = stage_seed(seed, "refine");
            provenance.record_stage_seed("refine", refine_seed);

            let pseudo = make_pseudolabels(&seasons, cfg.refiner.n_pseudo_clusters, cfg.linkage)
                .map_err(stage_err("refine"))?;
            let mut refiner_cfg = cfg.refiner.clone();
            refiner_cfg.seed = refine_seed;
            let state =
                train_refiner(&seasons, &pseudo.labels, &refiner_cfg).map_err(stage_err("refine"))?;

            for key in &season_keys {
                let mapped =
                    apply_linear_map(&state.map, &slot_inputs[key]).map_err(stage_err("refine"))?;
                slot_inputs.insert(key.clone(), mapped);
            }

            let mp = out_dir.join("refined_map.emb");
            state.map.save(&mp).map_err(stage_err("refine"))?;
            let tp = out_dir.join("refine_trace.jsonl");
            write_trace(&tp, &state.loss_trace).map_err(|e| e.with_stage("refine"))?;
            refine_record = Some(RefineRecord {
                model_id: refine_model.clone(),
                n_pseudo_clusters: cfg.refiner.n_pseudo_clusters,
                epochs: cfg.refiner.epochs,
                final_loss: *state.loss_trace.last().unwrap_or(&f64::NAN),
                map_sv_ratio: state.map_sv_ratio,
            });
            map_path = Some(mp);
            trace_path = Some(tp);
        }
    }

    // -- search ----------------------------------------------------------
    let mut search_plan = None;
    let layout = if let Some(candidates) = &cfg.candidates {
        let search_seed = stage_seed(seed, "search");
        provenance.record_stage_seed("search", search_seed);
        let relevant: BTreeMap<String, EmbeddingMatrix> = base_layout
            .slots
            .iter()
            .map(|s| (s.model_id.clone(), slot_inputs[&s.model_id].clone()))
            .collect();
        let plan = search_rates(
            &relevant,
            candidates,
            base_layout.total_dim,
            cfg.k_clusters,
            search_seed,
            cfg.mse_weight,
        )
        .map_err(stage_err("search"))?;
        let layout = layout_from_plan(&base_layout, &plan.target_dims)
            .map_err(|e| e.with_stage("search"))?;
        search_plan = Some(plan);
        layout
    } else {
        base_layout
    };

    // -- compress --------------------------------------------------------
    let mut slot_records = Vec::with_capacity(layout.slots.len());
    let mut composed_inputs: BTreeMap<String, EmbeddingMatrix> = BTreeMap::new();
    for slot in &layout.slots {
        let raw = &slot_inputs[&slot.model_id];
        let input = if cfg.normalize_before_svd {
            raw.normalize_rows_l2()
        } else {
            raw.clone()
        };
        let k = slot.width();
        let svd_seed = stage_seed(seed, &format!("svd:{}", slot.model_id));
        provenance.record_stage_seed(&format!("svd:{}", slot.model_id), svd_seed);

        let stage = "compress";
        let model = fit_truncated_svd(&input, k, svd_seed).map_err(stage_err(stage))?;
        let z = model.transform(&input).map_err(stage_err(stage))?;
        let x_hat = model.reconstruct(&z).map_err(stage_err(stage))?;
        let mse = embedkit::svd::reconstruction_mse(&input, &x_hat).map_err(stage_err(stage))?;

        let bypassed = k == input.n_cols();
        let mut out = if bypassed { input.clone() } else { z };
        if cfg.normalize_slots {
            out = out.normalize_rows_l2();
        }
        slot_records.push(SlotRecord {
            model_id: slot.model_id.clone(),
            native_dim: raw.n_cols(),
            target_dim: k,
            bypassed,
            mse,
            svd_seed,
        });
        composed_inputs.insert(slot.model_id.clone(), out);
    }

    // -- compose ---------------------------------------------------------
    let ensemble = compose(&layout, &composed_inputs).map_err(stage_err("compose"))?;
    let ensemble_path = out_dir.join("ensemble.emb");
    let layout_json = serde_json::to_value(&layout).map_err(stage_err("compose"))?;
    save_embeddings_with_layout(&ensemble, &ensemble_path, layout_json)
        .map_err(stage_err("compose"))?;

    let plan = PlanRecord {
        layout,
        slots: slot_records,
        refine: refine_record,
        search: search_plan,
    };
    let plan_path = out_dir.join("plan.json");
    std::fs::write(&plan_path, serde_json::to_string_pretty(&plan).map_err(CliError::from)?)
        .map_err(stage_err("compose"))?;

    // -- evaluate (optional) ----------------------------------------------
    let mut report_path = None;
    if let Some(tasks_file) = loaded.tasks_path() {
        let mut subs = BTreeMap::new();
        subs.insert("$ensemble".to_string(), ensemble_path.clone());
        let loaded_tasks = load_tasks(&tasks_file, &subs).map_err(|e| e.with_stage("evaluate"))?;
        provenance.record_input(&tasks_file).map_err(|e| e.with_stage("evaluate"))?;
        let probe = embedkit::eval::ProbeConfig {
            seed: stage_seed(seed, "evaluate"),
            ..Default::default()
        };
        provenance.record_stage_seed("evaluate", probe.seed);
        let report = crate::cmds::evaluate_tasks(&loaded_tasks.tasks, &probe, None, "ours")
            .map_err(|e| e.with_stage("evaluate"))?;
        let rp = out_dir.join("evaluation.json");
        std::fs::write(&rp, serde_json::to_string_pretty(&report).map_err(CliError::from)?)
            .map_err(stage_err("evaluate"))?;
        report_path = Some(rp);
    }

    // -- provenance --------------------------------------------------------
    provenance.record_output(&ensemble_path).map_err(|e| e.with_stage("provenance"))?;
    provenance.record_output(&plan_path).map_err(|e| e.with_stage("provenance"))?;
    for p in [&map_path, &trace_path, &report_path].into_iter().flatten() {
        provenance.record_output(p).map_err(|e| e.with_stage("provenance"))?;
    }
    let provenance_path = out_dir.join("provenance.json");
    provenance.write(&provenance_path).map_err(|e| e.with_stage("provenance"))?;

    Ok(PipelineOutputs {
        out_dir,
        ensemble: ensemble_path,
        plan: plan_path,
        provenance: provenance_path,
        map: map_path,
        trace: trace_path,
        report: report_path,
    })
}

fn resolve_out_dir(loaded: &LoadedConfig, flag: Option<PathBuf>) -> CliResult<PathBuf> {
    if let Some(dir) = flag {
        return Ok(dir);
    }
    if let Some(dir) = &loaded.config.out_dir {
        let p = Path::new(dir);
        return Ok(if p.is_absolute() {
            p.to_path_buf()
        } else {
            loaded.base_dir.join(p)
        });
    }
    if let Ok(dir) = std::env::var("EMBEDKIT_OUT_DIR") {
        return Ok(PathBuf::from(dir));
    }
    Err(CliError::new(
        "invalid_config",
        "no output directory: set config \"out_dir\", --out-dir, or EMBEDKIT_OUT_DIR",
    ))
}

fn check_row_alignment(inputs: &BTreeMap<String, EmbeddingMatrix>) -> CliResult<()> {
    let mut iter = inputs.iter();
    let (first_key, first) = match iter.next() {
        Some(kv) => kv,
        None => return Err(CliError::new("empty_input", "manifest has no entries")),
    };
    for (key, m) in iter {
        if m.n_rows() != first.n_rows() {
            return Err(CliError::new(
                "row_mismatch",
                format!(
                    "{key} has {} rows, {first_key} has {}",
                    m.n_rows(),
                    first.n_rows()
                ),
            ));
        }
        if !first.rows_aligned_with(m) {
            return Err(CliError::new(
                "row_mismatch",
                format!("{key} row_ids disagree with {first_key}"),
            ));
        }
    }
    Ok(())
}

/// Rebuilds the layout with the searched widths, keeping slot order.
fn layout_from_plan(
    base: &EnsembleLayout,
    dims: &BTreeMap<String, usize>,
) -> CliResult<EnsembleLayout> {
    let mut slots = Vec::with_capacity(base.slots.len());
    let mut cursor = 0usize;
    for slot in &base.slots {
        let width = *dims.get(&slot.model_id).ok_or_else(|| {
            CliError::from(embedkit::Error::MissingSlot(slot.model_id.clone()))
        })?;
        slots.push(Slot {
            model_id: slot.model_id.clone(),
            start: cursor,
            end: cursor + width,
            source_dim: slot.source_dim,
        });
        cursor += width;
    }
    EnsembleLayout::new(slots).map_err(CliError::from)
}

#[derive(Serialize)]
struct TraceRecord {
    epoch: usize,
    loss: f64,
}

fn write_trace(path: &Path, trace: &[f64]) -> CliResult<()> {
    let mut f = std::fs::File::create(path)?;
    for (epoch, &loss) in trace.iter().enumerate() {
        let line = serde_json::to_string(&TraceRecord { epoch, loss })?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}
