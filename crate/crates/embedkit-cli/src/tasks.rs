//! Task descriptor loading for the evaluate command: a JSON array of
//! descriptors referencing EMB1 feature files and CSV target files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use embedkit::eval::{Targets, Task, TaskKind, TaskMetric};
use embedkit::store::load_embeddings;

use crate::errors::{CliError, CliResult};

#[derive(Debug, Deserialize)]
pub struct TaskDescriptor {
    pub name: String,
    pub kind: TaskKind,
    /// EMB1 feature file; "$ensemble" resolves to the current pipeline's
    /// composed output.
    pub features: String,
    /// Target CSV with header `sample_id,target`.
    pub targets: String,
    #[serde(default)]
    pub metric: Option<TaskMetric>,
}

pub fn load_task_descriptors(path: &Path) -> CliResult<Vec<TaskDescriptor>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new("io", format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::new("invalid_config", format!("{}: {e}", path.display())))
}

pub struct LoadedTasks {
    pub tasks: Vec<Task>,
    /// Every file read while materializing the tasks, for provenance.
    pub files: Vec<PathBuf>,
}

/// Materializes descriptors into tasks. Relative paths resolve against the
/// descriptor file's directory; entries in `substitutions` (e.g.
/// "$ensemble") take precedence.
pub fn load_tasks(
    descriptor_path: &Path,
    substitutions: &BTreeMap<String, PathBuf>,
) -> CliResult<LoadedTasks> {
    let descriptors = load_task_descriptors(descriptor_path)?;
    let base = descriptor_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut tasks = Vec::with_capacity(descriptors.len());
    let mut files = vec![descriptor_path.to_path_buf()];
    for d in descriptors {
        let features_path = match substitutions.get(&d.features) {
            Some(p) => p.clone(),
            None => resolve(&base, &d.features),
        };
        let features = load_embeddings(&features_path)?;
        let targets_path = resolve(&base, &d.targets);
        let targets = load_targets_csv(&targets_path, d.kind, features.row_ids())?;
        files.push(features_path);
        files.push(targets_path);
        let metric = d.metric.unwrap_or(match d.kind {
            TaskKind::Classification => TaskMetric::Accuracy,
            TaskKind::Regression => TaskMetric::R2,
        });
        let task = Task {
            name: d.name,
            kind: d.kind,
            features,
            targets,
            metric,
        };
        task.validate()?;
        tasks.push(task);
    }
    Ok(LoadedTasks { tasks, files })
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Reads `sample_id,target` rows in feature-row order. When the feature file
/// carries row ids the sample ids must match them position by position.
fn load_targets_csv(
    path: &Path,
    kind: TaskKind,
    row_ids: Option<&[String]>,
) -> CliResult<Targets> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::new("csv", format!("{}: {e}", path.display())))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| CliError::new("csv", e.to_string()))?;
        let found: Vec<&str> = headers.iter().collect();
        if found != ["sample_id", "target"] {
            return Err(CliError::new(
                "invalid_header",
                format!("target CSV header {found:?}, expected [sample_id, target]"),
            ));
        }
    }
    let mut ids = Vec::new();
    let mut raw = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::new("csv", e.to_string()))?;
        ids.push(record.get(0).unwrap_or_default().to_string());
        raw.push(record.get(1).unwrap_or_default().to_string());
    }
    if let Some(expected) = row_ids {
        if ids != expected {
            return Err(CliError::new(
                "row_mismatch",
                format!("target sample_ids do not match feature row_ids in {}", path.display()),
            ));
        }
    }
    match kind {
        TaskKind::Classification => {
            let mut classes = Vec::with_capacity(raw.len());
            for (i, v) in raw.iter().enumerate() {
                let c: usize = v.parse().map_err(|_| {
                    CliError::new(
                        "invalid_config",
                        format!("row {i}: classification target {v:?} is not a class index"),
                    )
                })?;
                classes.push(c);
            }
            Ok(Targets::Classes(classes))
        }
        TaskKind::Regression => {
            let mut reals = Vec::with_capacity(raw.len());
            for (i, v) in raw.iter().enumerate() {
                let x: f64 = v.parse().map_err(|_| {
                    CliError::new(
                        "invalid_config",
                        format!("row {i}: regression target {v:?} is not a number"),
                    )
                })?;
                reals.push(x);
            }
            Ok(Targets::Real(reals))
        }
    }
}
