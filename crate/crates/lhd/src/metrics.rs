//! Discernibility and ranking statistics over benchmark result tables.
//!
//! A [`ScoreTable`] collects per-method trial lists for one condition
//! (dataset crossed with discretization policy). On top of it this module
//! computes adjacent-margin statistics ([`amar`], [`tmar`]), Welch t values
//! ([`welch_t`]), tie-corrected rank correlation ([`kendall_tau`]),
//! cross-condition ranking heatmaps ([`condition_heatmap`]), empirical
//! distribution functions ([`edf`]), top-k summaries, and training-failure
//! diagnostics. Results CSV files produced by the search CLI are read back
//! with [`read_results_csv`].

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};

use crate::error::LhdError;
use crate::Result;

/// One completed evaluation of a discretized architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub seed: u64,
    /// Validation accuracy in percent.
    pub val_acc: f64,
    /// Training accuracy in percent.
    pub train_acc: f64,
    pub params: u64,
    pub depth: u64,
}

/// Per-method trial lists for a single condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    /// Condition label, `dataset/policy`.
    pub condition: String,
    pub methods: BTreeMap<String, Vec<Trial>>,
}

impl ScoreTable {
    pub fn new(condition: impl Into<String>) -> Self {
        ScoreTable {
            condition: condition.into(),
            methods: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, method: impl Into<String>, trial: Trial) {
        self.methods.entry(method.into()).or_default().push(trial);
    }

    /// Checks that every method has at least one trial and that all
    /// accuracies are percentages in `[0, 100]`.
    pub fn validate(&self) -> Result<()> {
        for (method, trials) in &self.methods {
            if trials.is_empty() {
                return Err(LhdError::MalformedInput(format!(
                    "method {method} has no trials"
                )));
            }
            for t in trials {
                for (label, v) in [("val_acc", t.val_acc), ("train_acc", t.train_acc)] {
                    if !v.is_finite() || !(0.0..=100.0).contains(&v) {
                        return Err(LhdError::MalformedInput(format!(
                            "method {method}: {label} {v} outside [0, 100]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Header of the results CSV exchanged between the CLI and this module.
pub const RESULTS_HEADER: [&str; 8] = [
    "method",
    "dataset",
    "policy",
    "seed",
    "val_acc",
    "train_acc",
    "params",
    "depth",
];

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    pub policy: String,
    pub seed: u64,
    pub val_acc: f64,
    pub train_acc: f64,
    pub params: u64,
    pub depth: u64,
}

/// Reads a results CSV, verifying the exact header, and groups rows into
/// one validated [`ScoreTable`] per `dataset/policy` condition. Tables are
/// returned in lexicographic condition order.
pub fn read_results_csv(reader: impl io::Read) -> Result<Vec<ScoreTable>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected: Vec<&str> = RESULTS_HEADER.to_vec();
    let found: Vec<&str> = headers.iter().collect();
    if found != expected {
        return Err(LhdError::MalformedInput(format!(
            "results header {found:?} does not match {expected:?}"
        )));
    }
    let mut grouped: BTreeMap<String, ScoreTable> = BTreeMap::new();
    for record in rdr.deserialize::<ResultRow>() {
        let row = record?;
        let condition = format!("{}/{}", row.dataset, row.policy);
        let table = grouped
            .entry(condition.clone())
            .or_insert_with(|| ScoreTable::new(condition));
        table.push(
            row.method,
            Trial {
                seed: row.seed,
                val_acc: row.val_acc,
                train_acc: row.train_acc,
                params: row.params,
                depth: row.depth,
            },
        );
    }
    let tables: Vec<ScoreTable> = grouped.into_values().collect();
    for table in &tables {
        table.validate()?;
    }
    Ok(tables)
}

/// Arithmetic mean.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with Bessel's correction; a single observation
/// has deviation zero.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Methods ordered by mean validation accuracy, best first, ties broken
/// alphabetically by method name.
pub fn ranked_methods(table: &ScoreTable) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = table
        .methods
        .iter()
        .map(|(name, trials)| {
            let accs: Vec<f64> = trials.iter().map(|t| t.val_acc).collect();
            (name.clone(), mean(&accs))
        })
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    ranked
}

fn restricted_ranking(
    table: &ScoreTable,
    restrict_top: Option<usize>,
) -> Result<Vec<(String, f64)>> {
    table.validate()?;
    let mut ranked = ranked_methods(table);
    if let Some(k) = restrict_top {
        ranked.truncate(k);
    }
    if ranked.len() < 2 {
        return Err(LhdError::UndefinedMetric(format!(
            "adjacent-margin statistics need at least 2 methods, have {}",
            ranked.len()
        )));
    }
    Ok(ranked)
}

/// Average margin between adjacent items of the accuracy ranking, in
/// percentage points. `restrict_top` keeps only the k best methods.
pub fn amar(table: &ScoreTable, restrict_top: Option<usize>) -> Result<f64> {
    let ranked = restricted_ranking(table, restrict_top)?;
    let gaps: Vec<f64> = ranked
        .windows(2)
        .map(|w| (w[0].1 - w[1].1).abs())
        .collect();
    Ok(mean(&gaps))
}

/// Welch's t statistic for two summarized samples. Identical means give
/// zero; differing means over a zero-variance denominator give `+inf`.
pub fn welch_t(m1: f64, s1: f64, n1: usize, m2: f64, s2: f64, n2: usize) -> Result<f64> {
    for (label, m, s, n) in [("first", m1, s1, n1), ("second", m2, s2, n2)] {
        if !m.is_finite() || !s.is_finite() || s < 0.0 {
            return Err(LhdError::UndefinedMetric(format!(
                "{label} group has invalid summary (mean {m}, std {s})"
            )));
        }
        if n < 2 {
            return Err(LhdError::UndefinedMetric(format!(
                "{label} group needs n >= 2, has {n}"
            )));
        }
    }
    let num = (m1 - m2).abs();
    if num == 0.0 {
        return Ok(0.0);
    }
    let den = (s1 * s1 / n1 as f64 + s2 * s2 / n2 as f64).sqrt();
    if den == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(num / den)
}

/// t-test margin between adjacent items of the accuracy ranking: the mean
/// Welch t over adjacent pairs, with a configurable per-method sample count.
pub fn tmar(table: &ScoreTable, n_per_method: usize, restrict_top: Option<usize>) -> Result<f64> {
    if n_per_method < 2 {
        return Err(LhdError::UndefinedMetric(format!(
            "tmar needs n_per_method >= 2, got {n_per_method}"
        )));
    }
    let ranked = restricted_ranking(table, restrict_top)?;
    let stats: Vec<(f64, f64)> = ranked
        .iter()
        .map(|(name, m)| {
            let accs: Vec<f64> = table.methods[name].iter().map(|t| t.val_acc).collect();
            (*m, sample_std(&accs))
        })
        .collect();
    let mut ts = Vec::with_capacity(stats.len() - 1);
    for w in stats.windows(2) {
        ts.push(welch_t(
            w[0].0,
            w[0].1,
            n_per_method,
            w[1].0,
            w[1].1,
            n_per_method,
        )?);
    }
    Ok(mean(&ts))
}

/// Tie-corrected Kendall rank correlation (the tau-b variant) over paired
/// observations. Errors when either side is entirely tied.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(LhdError::UndefinedMetric(format!(
            "paired samples differ in length: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(LhdError::UndefinedMetric(
            "rank correlation needs at least 2 pairs".into(),
        ));
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(LhdError::UndefinedMetric(
            "rank correlation inputs must be finite".into(),
        ));
    }
    let n = xs.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = xs[i].partial_cmp(&xs[j]).unwrap();
            let dy = ys[i].partial_cmp(&ys[j]).unwrap();
            match (dx, dy) {
                (std::cmp::Ordering::Equal, _) | (_, std::cmp::Ordering::Equal) => {}
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let pairs_x = n0 - tied_pairs(xs);
    let pairs_y = n0 - tied_pairs(ys);
    let den = (pairs_x as f64 * pairs_y as f64).sqrt();
    if den == 0.0 {
        return Err(LhdError::UndefinedMetric(
            "rank correlation undefined: one side is entirely tied".into(),
        ));
    }
    Ok((concordant - discordant) as f64 / den)
}

fn tied_pairs(vals: &[f64]) -> i64 {
    let n = vals.len();
    let mut tied = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            if vals[i] == vals[j] {
                tied += 1;
            }
        }
    }
    tied
}

/// Pairwise Kendall tau between conditions, computed over the mean
/// validation accuracies of the methods shared by each pair. Returns the
/// condition labels alongside a symmetric matrix with unit diagonal.
pub fn condition_heatmap(tables: &[ScoreTable]) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    if tables.is_empty() {
        return Err(LhdError::UndefinedMetric(
            "heatmap needs at least one condition".into(),
        ));
    }
    let labels: Vec<String> = tables.iter().map(|t| t.condition.clone()).collect();
    let means: Vec<BTreeMap<String, f64>> = tables
        .iter()
        .map(|t| {
            t.validate()?;
            Ok(ranked_methods(t).into_iter().collect())
        })
        .collect::<Result<_>>()?;
    let n = tables.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        matrix[i][i] = 1.0;
        for j in (i + 1)..n {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (method, mi) in &means[i] {
                if let Some(mj) = means[j].get(method) {
                    xs.push(*mi);
                    ys.push(*mj);
                }
            }
            if xs.len() < 2 {
                return Err(LhdError::UndefinedMetric(format!(
                    "conditions {} and {} share fewer than 2 methods",
                    labels[i], labels[j]
                )));
            }
            let tau = kendall_tau(&xs, &ys)?;
            matrix[i][j] = tau;
            matrix[j][i] = tau;
        }
    }
    Ok((labels, matrix))
}

/// Empirical distribution function of a sample: distinct values in
/// ascending order paired with cumulative probabilities ending at 1.
pub fn edf(samples: &[f64]) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(LhdError::UndefinedMetric(
            "edf needs at least one sample".into(),
        ));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(LhdError::UndefinedMetric("edf inputs must be finite".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut steps: Vec<(f64, f64)> = Vec::new();
    let mut seen = 0usize;
    for v in sorted {
        seen += 1;
        match steps.last_mut() {
            Some(last) if last.0 == v => last.1 = seen as f64 / n,
            _ => steps.push((v, seen as f64 / n)),
        }
    }
    Ok(steps)
}

/// Best trial accuracy and the mean of the k best.
pub fn topk_summary(trials: &[Trial], k: usize) -> Result<(f64, f64)> {
    if k == 0 || k > trials.len() {
        return Err(LhdError::UndefinedMetric(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            trials.len()
        )));
    }
    let mut accs: Vec<f64> = trials.iter().map(|t| t.val_acc).collect();
    accs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok((accs[0], mean(&accs[..k])))
}

/// Fraction of trials whose final training accuracy is below their
/// validation accuracy.
pub fn hard_to_train_fraction(trials: &[Trial]) -> Result<f64> {
    if trials.is_empty() {
        return Err(LhdError::UndefinedMetric(
            "hard-to-train fraction needs at least one trial".into(),
        ));
    }
    let hard = trials.iter().filter(|t| t.train_acc < t.val_acc).count();
    Ok(hard as f64 / trials.len() as f64)
}

/// Kendall tau between parameter counts and validation accuracies. Errors
/// when every trial has the same parameter count.
pub fn param_acc_correlation(trials: &[Trial]) -> Result<f64> {
    let params: Vec<f64> = trials.iter().map(|t| t.params as f64).collect();
    let accs: Vec<f64> = trials.iter().map(|t| t.val_acc).collect();
    kendall_tau(&params, &accs)
}

/// Per-method ranking entry inside a [`ConditionReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_val_acc: f64,
    pub std_val_acc: f64,
    pub trials: usize,
}

/// Ranking and margin statistics for one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub ranking: Vec<MethodSummary>,
    pub amar: f64,
    pub amar_top3: f64,
    pub tmar: f64,
    pub tmar_top3: f64,
}

/// Full report over a set of conditions: per-condition rankings plus the
/// cross-condition rank-correlation heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub conditions: Vec<ConditionReport>,
    pub heatmap_conditions: Vec<String>,
    pub heatmap: Vec<Vec<f64>>,
}

/// Builds a [`RankReport`] from per-condition tables.
pub fn rank_report(tables: &[ScoreTable], n_per_method: usize) -> Result<RankReport> {
    let mut conditions = Vec::with_capacity(tables.len());
    for table in tables {
        let ranking = restricted_ranking(table, None)?
            .into_iter()
            .map(|(method, mean_val_acc)| {
                let trials = &table.methods[&method];
                let accs: Vec<f64> = trials.iter().map(|t| t.val_acc).collect();
                MethodSummary {
                    method,
                    mean_val_acc,
                    std_val_acc: sample_std(&accs),
                    trials: trials.len(),
                }
            })
            .collect();
        conditions.push(ConditionReport {
            condition: table.condition.clone(),
            ranking,
            amar: amar(table, None)?,
            amar_top3: amar(table, Some(3))?,
            tmar: tmar(table, n_per_method, None)?,
            tmar_top3: tmar(table, n_per_method, Some(3))?,
        });
    }
    let (heatmap_conditions, heatmap) = condition_heatmap(tables)?;
    Ok(RankReport {
        conditions,
        heatmap_conditions,
        heatmap,
    })
}
