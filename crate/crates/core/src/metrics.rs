//! Ranking metrics: AUC by rank sums with tied ranks averaged, and
//! impression-weighted group AUC.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::heads::TASKS;

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        bail!(Domain, "{} scores for {} labels", scores.len(), labels.len());
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        bail!(NonFinite, "score {} is NaN", i);
    }
    if let Some(i) = labels.iter().position(|&y| y > 1) {
        bail!(Domain, "label {} is {}, expected 0 or 1", i, labels[i]);
    }
    Ok(())
}

/// Probability a random positive outscores a random negative, ties counted half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        bail!(UndefinedMetric, "AUC needs both classes ({} positives, {} negatives)", positives, negatives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled ranks keep the tie average an integer.
    let mut doubled_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let doubled = (start + 1 + end) as u64;
        let pos_in_block = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        doubled_rank_sum += doubled * pos_in_block;
        start = end;
    }
    let doubled_u = doubled_rank_sum - positives * (positives + 1);
    Ok(doubled_u as f64 / (2 * positives * negatives) as f64)
}

/// Impression-weighted mean of per-group AUC over groups with both classes.
pub fn gauc(scores: &[f64], labels: &[u8], groups: &[u64]) -> Result<f64> {
    check(scores, labels)?;
    if groups.len() != scores.len() {
        bail!(Domain, "{} group ids for {} scores", groups.len(), scores.len());
    }
    let mut members: BTreeMap<u64, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&s, &y), &g) in scores.iter().zip(labels).zip(groups) {
        let entry = members.entry(g).or_default();
        entry.0.push(s);
        entry.1.push(y);
    }
    let mut valid = Vec::new();
    for (s, y) in members.values() {
        match auc(s, y) {
            Ok(a) => valid.push((s.len(), a)),
            Err(crate::Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let total: usize = valid.iter().map(|v| v.0).sum();
    if total == 0 {
        bail!(UndefinedMetric, "no group contains both classes");
    }
    // Normalized weights keep a single group's AUC exact.
    Ok(valid.iter().map(|&(n, a)| n as f64 / total as f64 * a).sum())
}

/// AUC and GAUC for one task; `None` where the metric is undefined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
}

impl TaskMetrics {
    fn compute(scores: &[f64], labels: &[u8], users: &[u64]) -> Result<Self> {
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(crate::Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self { auc: defined(auc(scores, labels))?, gauc: defined(gauc(scores, labels, users))? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub scenario: usize,
    pub samples: usize,
    pub ctr: TaskMetrics,
    pub ctcvr: TaskMetrics,
}

/// Pooled and per-scenario metrics for both tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub ctr: TaskMetrics,
    pub ctcvr: TaskMetrics,
    pub scenarios: Vec<ScenarioMetrics>,
}

impl MetricReport {
    /// `probs[i]` and `labels[i]` are (CTR, CTCVR); GAUC groups by user.
    pub fn compute(probs: &[[f64; TASKS]], labels: &[[u8; TASKS]], users: &[u64], scenarios: &[usize]) -> Result<Self> {
        let n = probs.len();
        if labels.len() != n || users.len() != n || scenarios.len() != n {
            bail!(Domain, "metric inputs disagree in length");
        }
        let task = |idx: &[usize], t: usize| -> Result<TaskMetrics> {
            let s: Vec<f64> = idx.iter().map(|&i| probs[i][t]).collect();
            let y: Vec<u8> = idx.iter().map(|&i| labels[i][t]).collect();
            let u: Vec<u64> = idx.iter().map(|&i| users[i]).collect();
            TaskMetrics::compute(&s, &y, &u)
        };
        let all: Vec<usize> = (0..n).collect();
        let mut by_scenario: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in scenarios.iter().enumerate() {
            by_scenario.entry(c).or_default().push(i);
        }
        let mut per = Vec::with_capacity(by_scenario.len());
        for (scenario, idx) in &by_scenario {
            per.push(ScenarioMetrics { scenario: *scenario, samples: idx.len(), ctr: task(idx, 0)?, ctcvr: task(idx, 1)? });
        }
        Ok(Self { samples: n, ctr: task(&all, 0)?, ctcvr: task(&all, 1)?, scenarios: per })
    }
}
