//! Downstream probing and leaderboard scoring: bias-free linear and logistic
//! probes (the test-time model family), unweighted q_mean, and the
//! std-weighted task-balanced q_mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::matrix::EmbeddingMatrix;
use crate::refine::ProbeWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMetric {
    Accuracy,
    R2,
}

#[derive(Debug, Clone)]
pub enum Targets {
    Classes(Vec<usize>),
    Real(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub kind: TaskKind,
    pub features: EmbeddingMatrix,
    pub targets: Targets,
    pub metric: TaskMetric,
}

impl Task {
    pub fn validate(&self) -> Result<()> {
        if self.features.n_rows() != self.targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "task {:?}: {} feature rows vs {} targets",
                self.name,
                self.features.n_rows(),
                self.targets.len()
            )));
        }
        match (self.kind, &self.targets, self.metric) {
            (TaskKind::Classification, Targets::Classes(_), TaskMetric::Accuracy) => Ok(()),
            (TaskKind::Regression, Targets::Real(_), TaskMetric::R2) => Ok(()),
            _ => Err(Error::InvalidConfig(format!(
                "task {:?}: kind/targets/metric combination is inconsistent",
                self.name
            ))),
        }
    }
}

/// Probe predictions, aligned with a task's targets.
#[derive(Debug, Clone)]
pub enum Predictions {
    Classes(Vec<usize>),
    Real(Vec<f64>),
}

/// Ridge regression without an intercept: `w = (XᵀX + λI)⁻¹ Xᵀ y`, solved in
/// f64. With λ = 0 a rank-deficient system is reported as an error rather
/// than silently regularized.
pub fn fit_linear_probe_no_bias(
    x: &EmbeddingMatrix,
    y: &[f64],
    ridge: f64,
) -> Result<Vec<f64>> {
    if x.n_rows() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows vs {} targets",
            x.n_rows(),
            y.len()
        )));
    }
    if ridge < 0.0 {
        return Err(Error::InvalidConfig("ridge must be >= 0".into()));
    }
    let xm = Mat::from_embedding(x);
    let mut gram = linalg::matmul_atb(&xm, &xm);
    for i in 0..gram.rows {
        let v = gram.get(i, i) + ridge;
        gram.set(i, i, v);
    }
    let mut xty = vec![0.0f64; x.n_cols()];
    for i in 0..x.n_rows() {
        let row = xm.row(i);
        for (slot, &v) in xty.iter_mut().zip(row) {
            *slot += v * y[i];
        }
    }
    linalg::cholesky_solve(&gram, &xty)
}

pub fn predict_linear(x: &EmbeddingMatrix, w: &[f64]) -> Result<Vec<f64>> {
    if x.n_cols() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} cols vs {} weights",
            x.n_cols(),
            w.len()
        )));
    }
    Ok((0..x.n_rows())
        .map(|i| {
            x.row(i)
                .iter()
                .zip(w)
                .map(|(&a, &b)| a as f64 * b)
                .sum::<f64>()
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct LogisticProbe {
    pub weights: ProbeWeights,
    pub final_loss: f64,
}

/// Bias-free multinomial logistic regression by full-batch gradient descent
/// from zero weights.
///
/// Zero init keeps the solver exactly equivariant under class relabeling.
/// The run is deterministic; `_seed` is accepted for interface stability but
/// the full-batch path consumes no randomness.
pub fn fit_logistic_probe_no_bias(
    x: &EmbeddingMatrix,
    y: &[usize],
    ridge: f64,
    iters: usize,
    lr: f64,
    _seed: u64,
) -> Result<LogisticProbe> {
    let n = x.n_rows();
    if n == 0 {
        return Err(Error::EmptyInput("no samples".into()));
    }
    if y.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} rows", y.len())));
    }
    let c = y.iter().max().map(|&m| m + 1).unwrap_or(0);
    let distinct: std::collections::HashSet<usize> = y.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::DegenerateTargets(
            "logistic probe needs at least 2 classes present".into(),
        ));
    }
    if !(lr > 0.0) || iters == 0 {
        return Err(Error::InvalidConfig("lr must be > 0 and iters >= 1".into()));
    }
    let d = x.n_cols();
    let xm = Mat::from_embedding(x);
    let mut w = Mat::zeros(c, d);
    let mut final_loss = f64::INFINITY;

    for iter in 0..iters {
        let logits = linalg::matmul_abt(&xm, &w); // n x c
        let mut loss = 0.0f64;
        let mut g = Mat::zeros(n, c);
        for i in 0..n {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + denom.ln();
            loss += lse - row[y[i]];
            let grow = g.row_mut(i);
            for j in 0..c {
                grow[j] = (row[j] - lse).exp();
            }
            grow[y[i]] -= 1.0;
        }
        loss = loss / n as f64 + 0.5 * ridge * w.frobenius_sq();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(iter));
        }
        final_loss = loss;
        g.scale(1.0 / n as f64);
        let mut grad = linalg::matmul_atb(&g, &xm); // c x d
        grad.add_scaled(&w, ridge);
        w.add_scaled(&grad, -lr);
    }

    Ok(LogisticProbe {
        weights: ProbeWeights::from_weights(c, d, w.data)?,
        final_loss,
    })
}

/// Argmax class predictions of a bias-free probe.
pub fn predict_logistic(x: &EmbeddingMatrix, probe: &ProbeWeights) -> Result<Vec<usize>> {
    if x.n_cols() != probe.in_dim() {
        return Err(Error::ShapeMismatch(format!(
            "{} cols vs probe in_dim {}",
            x.n_cols(),
            probe.in_dim()
        )));
    }
    Ok((0..x.n_rows())
        .map(|i| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for ci in 0..probe.n_classes() {
                let v: f64 = x
                    .row(i)
                    .iter()
                    .zip(probe.class_row(ci))
                    .map(|(&a, &b)| a as f64 * b)
                    .sum();
                if v > best_v {
                    best_v = v;
                    best = ci;
                }
            }
            best
        })
        .collect())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Coefficient of determination against the target mean. Constant targets
/// make R² undefined and are rejected.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|&t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::DegenerateTargets(
            "constant targets make R^2 undefined".into(),
        ));
    }
    let ss_res: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (t - p) * (t - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn score_task(task: &Task, predictions: &Predictions) -> Result<f64> {
    task.validate()?;
    match (&task.targets, predictions) {
        (Targets::Classes(y), Predictions::Classes(p)) => accuracy(p, y),
        (Targets::Real(y), Predictions::Real(p)) => r_squared(p, y),
        _ => Err(Error::ShapeMismatch(format!(
            "task {:?}: prediction type does not match targets",
            task.name
        ))),
    }
}

/// Fit the matching probe on a task's features and score its in-sample
/// predictions.
pub fn evaluate_task(task: &Task, probe: &ProbeConfig) -> Result<f64> {
    task.validate()?;
    match &task.targets {
        Targets::Real(y) => {
            let w = fit_linear_probe_no_bias(&task.features, y, probe.ridge)?;
            let pred = predict_linear(&task.features, &w)?;
            score_task(task, &Predictions::Real(pred))
        }
        Targets::Classes(y) => {
            let fit = fit_logistic_probe_no_bias(
                &task.features,
                y,
                probe.ridge,
                probe.iters,
                probe.lr,
                probe.seed,
            )?;
            let pred = predict_logistic(&task.features, &fit.weights)?;
            score_task(task, &Predictions::Classes(pred))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub ridge: f64,
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-4,
            iters: 300,
            lr: 0.5,
            seed: 0,
        }
    }
}

/// Unweighted arithmetic mean of per-task scores.
pub fn q_mean(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("q_mean of no scores".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::DegenerateTargets(format!("non-finite score {bad}")));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Scores of every team on every task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeaderboardMatrix {
    pub teams: Vec<String>,
    pub tasks: Vec<String>,
    /// teams × tasks, row-major.
    pub scores: Vec<f64>,
}

impl LeaderboardMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.teams.len() < 2 || self.tasks.is_empty() {
            return Err(Error::EmptyInput(
                "leaderboard needs >= 2 teams and >= 1 task".into(),
            ));
        }
        if self.scores.len() != self.teams.len() * self.tasks.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for {} teams x {} tasks",
                self.scores.len(),
                self.teams.len(),
                self.tasks.len()
            )));
        }
        if let Some(bad) = self.scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::DegenerateTargets(format!("non-finite score {bad}")));
        }
        Ok(())
    }

    pub fn score(&self, team: usize, task: usize) -> f64 {
        self.scores[team * self.tasks.len() + task]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalancedScores {
    /// Weighted score per team, in leaderboard team order.
    pub team_scores: Vec<f64>,
    /// Per-task weights; non-negative and summing to 1.
    pub weights: Vec<f64>,
}

/// Applies an externally chosen weight vector to a leaderboard. This is the
/// plug point for alternative weighting schemes; [`task_balanced_q_mean`]
/// feeds it the std-proportional weights.
pub fn weighted_team_scores(board: &LeaderboardMatrix, weights: &[f64]) -> Result<Vec<f64>> {
    board.validate()?;
    if weights.len() != board.tasks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} tasks",
            weights.len(),
            board.tasks.len()
        )));
    }
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(Error::OutOfRange("weights must be finite and >= 0".into()));
    }
    Ok((0..board.teams.len())
        .map(|m| (0..board.tasks.len()).map(|t| weights[t] * board.score(m, t)).sum())
        .collect())
}

/// Task-balanced q_mean: task `t` gets weight `σ_t / Σ_u σ_u`, where `σ_t` is
/// the population standard deviation of all teams' scores on that task, so
/// tasks the field agrees on stop counting. All-zero spreads fall back to
/// uniform weights.
pub fn task_balanced_q_mean(board: &LeaderboardMatrix) -> Result<BalancedScores> {
    board.validate()?;
    let n_teams = board.teams.len();
    let n_tasks = board.tasks.len();

    let mut sigma = vec![0.0f64; n_tasks];
    for t in 0..n_tasks {
        // Identical scores mean exactly zero spread; skipping the formula
        // avoids fp noise promoting a constant task to a nonzero weight.
        let first = board.score(0, t);
        if (0..n_teams).all(|m| board.score(m, t) == first) {
            continue;
        }
        let mean: f64 = (0..n_teams).map(|m| board.score(m, t)).sum::<f64>() / n_teams as f64;
        let var: f64 = (0..n_teams)
            .map(|m| {
                let d = board.score(m, t) - mean;
                d * d
            })
            .sum::<f64>()
            / n_teams as f64;
        sigma[t] = var.sqrt();
    }
    let total: f64 = sigma.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        sigma.iter().map(|&s| s / total).collect()
    } else {
        vec![1.0 / n_tasks as f64; n_tasks]
    };
    let team_scores = weighted_team_scores(board, &weights)?;

    Ok(BalancedScores {
        team_scores,
        weights,
    })
}

/// Per-task results plus the aggregate scores, serialized for CLI output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tasks: Vec<TaskScore>,
    pub q_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_balanced_q_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskScore {
    pub name: String,
    pub kind: TaskKind,
    pub score: f64,
}
