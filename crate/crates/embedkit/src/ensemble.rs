//! Slotted composition of the final fixed-width embedding and the per-model
//! compression-rate search.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::{self};
use crate::error::{Error, Result};
use crate::matrix::EmbeddingMatrix;
use crate::svd;

/// One contiguous column range of the composed vector, owned by one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub model_id: String,
    /// Inclusive start column.
    pub start: usize,
    /// Exclusive end column.
    pub end: usize,
    /// Nominal width of the source embedding before compression.
    pub source_dim: usize,
}

impl Slot {
    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleLayout {
    pub slots: Vec<Slot>,
    pub total_dim: usize,
}

impl EnsembleLayout {
    /// Builds a layout from ordered slots, enforcing that they are
    /// contiguous, non-overlapping, start at 0, and sum to `total_dim`.
    pub fn new(slots: Vec<Slot>) -> Result<Self> {
        let mut cursor = 0usize;
        for slot in &slots {
            if slot.end <= slot.start {
                return Err(Error::InvalidLayout(format!(
                    "slot {:?} has empty range [{}, {})",
                    slot.model_id, slot.start, slot.end
                )));
            }
            if slot.start != cursor {
                return Err(Error::InvalidLayout(format!(
                    "slot {:?} starts at {} but previous slot ends at {cursor}",
                    slot.model_id, slot.start
                )));
            }
            cursor = slot.end;
        }
        if slots.is_empty() {
            return Err(Error::InvalidLayout("layout has no slots".into()));
        }
        Ok(Self {
            total_dim: cursor,
            slots,
        })
    }

    pub fn slot(&self, model_id: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.model_id == model_id)
    }
}

/// The seven-slot 1024-wide composition:
///
/// | range        | slot              |
/// |--------------|-------------------|
/// | [0:128]      | convnext_xxl      |
/// | [128:384]    | vit_huge_clip     |
/// | [384:512]    | vit_base_dino     |
/// | [512:640]    | georsclip_spring  |
/// | [640:768]    | georsclip_summer  |
/// | [768:896]    | georsclip_fall    |
/// | [896:1024]   | georsclip_winter  |
pub fn default_layout() -> EnsembleLayout {
    let spec: [(&str, usize, usize, usize); 7] = [
        ("convnext_xxl", 0, 128, 1024),
        ("vit_huge_clip", 128, 384, 1024),
        ("vit_base_dino", 384, 512, 768),
        ("georsclip_spring", 512, 640, 1024),
        ("georsclip_summer", 640, 768, 1024),
        ("georsclip_fall", 768, 896, 1024),
        ("georsclip_winter", 896, 1024, 1024),
    ];
    EnsembleLayout::new(
        spec.iter()
            .map(|&(id, start, end, source_dim)| Slot {
                model_id: id.into(),
                start,
                end,
                source_dim,
            })
            .collect(),
    )
    .expect("default layout is well-formed")
}

/// Assembles the final N×total_dim matrix. Columns `[start, end)` of the
/// output are bit-identical to the slot's input matrix.
pub fn compose(
    layout: &EnsembleLayout,
    compressed: &BTreeMap<String, EmbeddingMatrix>,
) -> Result<EmbeddingMatrix> {
    let mut parts: Vec<&EmbeddingMatrix> = Vec::with_capacity(layout.slots.len());
    for slot in &layout.slots {
        let m = compressed
            .get(&slot.model_id)
            .ok_or_else(|| Error::MissingSlot(slot.model_id.clone()))?;
        if m.n_cols() != slot.width() {
            return Err(Error::ShapeMismatch(format!(
                "slot {:?} expects width {}, matrix has {} cols",
                slot.model_id,
                slot.width(),
                m.n_cols()
            )));
        }
        parts.push(m);
    }
    let first = parts[0];
    for (slot, m) in layout.slots.iter().zip(&parts) {
        if m.n_rows() != first.n_rows() {
            return Err(Error::RowMismatch(format!(
                "slot {:?} has {} rows, expected {}",
                slot.model_id,
                m.n_rows(),
                first.n_rows()
            )));
        }
        if !first.rows_aligned_with(m) {
            return Err(Error::RowMismatch(format!(
                "slot {:?} row_ids are misaligned",
                slot.model_id
            )));
        }
    }

    let composed = crate::matrix::concat_columns(&parts)?;
    Ok(composed.with_model_id("ensemble"))
}

/// Quality numbers backing one model's candidate dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelQuality {
    pub model_id: String,
    pub dim: usize,
    pub mse: f64,
    /// MSE divided by the model input's mean squared entry, i.e. the
    /// fraction of Frobenius energy lost.
    pub normalized_mse: f64,
    pub silhouette: f64,
    pub silhouette_baseline: f64,
}

/// One scored dimension combination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComboScore {
    pub dims: BTreeMap<String, usize>,
    pub objective: f64,
    pub models: Vec<ModelQuality>,
}

/// The chosen per-model target dimensions plus the full score table that
/// justified the choice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub target_dims: BTreeMap<String, usize>,
    pub objective: f64,
    pub total_budget: usize,
    pub mse_weight: f64,
    pub table: Vec<ComboScore>,
}

const SEARCH_KMEANS_MAX_ITER: usize = 100;
const SEARCH_KMEANS_TOL: f64 = 1e-7;

/// Exhaustive search over candidate dimension combinations that sum to the
/// budget.
///
/// Each combination scores `Σ_models (silhouette_compressed −
/// silhouette_baseline) − mse_weight · normalized_mse`, and the argmax wins;
/// ties go to the lexicographically smallest dimension vector (model ids in
/// sorted order, candidate lists ascending). The complete table is returned
/// so a human can overrule the objective.
pub fn search_rates(
    embeddings: &BTreeMap<String, EmbeddingMatrix>,
    candidate_dims: &BTreeMap<String, Vec<usize>>,
    total_budget: usize,
    k_clusters: usize,
    seed: u64,
    mse_weight: f64,
) -> Result<CompressionPlan> {
    if embeddings.is_empty() {
        return Err(Error::EmptyInput("search_rates with no models".into()));
    }
    for id in candidate_dims.keys() {
        if !embeddings.contains_key(id) {
            return Err(Error::MissingSlot(id.clone()));
        }
    }
    for id in embeddings.keys() {
        if !candidate_dims.contains_key(id) {
            return Err(Error::InvalidConfig(format!(
                "no candidate dims for model {id:?}"
            )));
        }
    }

    let model_ids: Vec<&String> = embeddings.keys().collect();
    let mut candidates: Vec<Vec<usize>> = Vec::with_capacity(model_ids.len());
    for id in &model_ids {
        let mut dims = candidate_dims[*id].clone();
        dims.sort_unstable();
        dims.dedup();
        if dims.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "empty candidate list for model {id:?}"
            )));
        }
        candidates.push(dims);
    }

    // Score each (model, dim) once; combinations reuse the cache.
    let mut quality: Vec<BTreeMap<usize, ModelQuality>> = Vec::with_capacity(model_ids.len());
    for (mi, id) in model_ids.iter().enumerate() {
        let x = &embeddings[*id];
        let energy = mean_squared_entry(x);
        let baseline = kmeans_silhouette(x, k_clusters, seed)?;
        let mut per_dim = BTreeMap::new();
        for &dim in &candidates[mi] {
            let model = svd::fit_truncated_svd(x, dim, seed)?;
            let z = model.transform(x)?;
            let x_hat = model.reconstruct(&z)?;
            let mse = svd::reconstruction_mse(x, &x_hat)?;
            let normalized_mse = if energy > 0.0 { mse / energy } else { 0.0 };
            let silhouette = kmeans_silhouette(&z, k_clusters, seed)?;
            per_dim.insert(
                dim,
                ModelQuality {
                    model_id: (*id).clone(),
                    dim,
                    mse,
                    normalized_mse,
                    silhouette,
                    silhouette_baseline: baseline,
                },
            );
        }
        quality.push(per_dim);
    }

    // Cartesian product in lexicographic order over (sorted ids, ascending
    // dims); keeping the first strict maximum realizes the tie-break.
    let mut table = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut indices = vec![0usize; model_ids.len()];
    'outer: loop {
        let dims: Vec<usize> = indices
            .iter()
            .enumerate()
            .map(|(mi, &ci)| candidates[mi][ci])
            .collect();
        if dims.iter().sum::<usize>() == total_budget {
            let models: Vec<ModelQuality> = dims
                .iter()
                .enumerate()
                .map(|(mi, dim)| quality[mi][dim].clone())
                .collect();
            let objective: f64 = models
                .iter()
                .map(|q| (q.silhouette - q.silhouette_baseline) - mse_weight * q.normalized_mse)
                .sum();
            let dims_map: BTreeMap<String, usize> = model_ids
                .iter()
                .zip(&dims)
                .map(|(id, &d)| ((*id).clone(), d))
                .collect();
            let row_index = table.len();
            table.push(ComboScore {
                dims: dims_map,
                objective,
                models,
            });
            if best.is_none_or(|(b, _)| objective > b) {
                best = Some((objective, row_index));
            }
        }
        // Advance the odometer.
        for mi in (0..indices.len()).rev() {
            indices[mi] += 1;
            if indices[mi] < candidates[mi].len() {
                continue 'outer;
            }
            indices[mi] = 0;
            if mi == 0 {
                break 'outer;
            }
        }
    }

    let (objective, best_index) =
        best.ok_or(Error::NoFeasibleCombination(total_budget))?;
    Ok(CompressionPlan {
        target_dims: table[best_index].dims.clone(),
        objective,
        total_budget,
        mse_weight,
        table,
    })
}

fn mean_squared_entry(x: &EmbeddingMatrix) -> f64 {
    if x.data().is_empty() {
        return 0.0;
    }
    x.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.data().len() as f64
}

fn kmeans_silhouette(x: &EmbeddingMatrix, k_clusters: usize, seed: u64) -> Result<f64> {
    let km = cluster::kmeans(x, k_clusters, seed, SEARCH_KMEANS_MAX_ITER, SEARCH_KMEANS_TOL)?;
    cluster::silhouette_score(x, &km.assignment.labels)
}
