//! Retrieval metrics: average precision, MAP, precision@T and precision-recall curves.

use log::warn;

use crate::error::{Error, Result};

/// Ranked relevance flags for one query plus the number of relevant database items.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelevanceJudgment {
    pub flags: Vec<bool>,
    pub total_relevant: usize,
}

impl RelevanceJudgment {
    /// Flags items whose label equals the query label. `ranking` holds database ids.
    pub fn from_labels(query_label: u32, ranking: &[usize], db_labels: &[u32]) -> Result<Self> {
        let flags = ranking
            .iter()
            .map(|&id| {
                db_labels
                    .get(id)
                    .map(|&l| l == query_label)
                    .ok_or_else(|| Error::Dimension(format!("ranked id {id} outside database of {}", db_labels.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        let total_relevant = db_labels.iter().filter(|&&l| l == query_label).count();
        Ok(Self { flags, total_relevant })
    }
}

fn check_total(flags: &[bool], total_relevant: usize) -> Result<()> {
    if total_relevant == 0 {
        return Err(Error::UndefinedQuery);
    }
    let found = flags.iter().filter(|&&f| f).count();
    if found > total_relevant {
        return Err(Error::Dimension(format!(
            "{found} relevant flags but only {total_relevant} relevant items"
        )));
    }
    Ok(())
}

/// Mean of the precision at each relevant rank, divided by all relevant items
/// (so relevant items never retrieved count as zero).
pub fn average_precision(flags: &[bool], total_relevant: usize) -> Result<f64> {
    check_total(flags, total_relevant)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        hits += 1;
        sum += hits as f64 / (rank + 1) as f64;
    }
    Ok(sum / total_relevant as f64)
}

pub fn mean_average_precision(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::NoValidQueries);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Relevant items among the first `t`, over `t`. Short lists count as padded with misses.
pub fn precision_at_t(flags: &[bool], t: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::Config("P@T needs T >= 1".into()));
    }
    let hits = flags.iter().take(t).filter(|&&f| f).count();
    Ok(hits as f64 / t as f64)
}

/// (recall, precision) after every rank, downsampled to at most `points` entries.
///
/// Downsampling keeps the ranks of evenly spaced relevant hits (evenly spaced recall
/// levels) plus the final rank when misses trail the last hit, which keeps the area
/// under the curve close to the average precision.
pub fn pr_curve(flags: &[bool], total_relevant: usize, points: usize) -> Result<Vec<(f64, f64)>> {
    check_total(flags, total_relevant)?;
    let mut hits = 0usize;
    let full: Vec<(f64, f64)> = flags
        .iter()
        .enumerate()
        .map(|(rank, &f)| {
            hits += f as usize;
            (hits as f64 / total_relevant as f64, hits as f64 / (rank + 1) as f64)
        })
        .collect();
    if points == 0 || full.len() <= points {
        return Ok(full);
    }
    let hit_ranks: Vec<usize> = (0..flags.len()).filter(|&r| flags[r]).collect();
    let last = flags.len() - 1;
    let tail = hit_ranks.last() != Some(&last);
    let targets = if tail { points - 1 } else { points }.min(hit_ranks.len());
    let mut picked: Vec<(f64, f64)> = (1..=targets)
        .map(|j| full[hit_ranks[(j * hit_ranks.len()).div_ceil(targets) - 1]])
        .collect();
    if tail {
        picked.push(full[last]);
    }
    Ok(picked)
}

/// Step-rule area: each point's precision times the recall gained since the previous point.
/// On an undownsampled curve this equals the average precision exactly.
pub fn pr_auc(curve: &[(f64, f64)]) -> f64 {
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for &(recall, precision) in curve {
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

/// Point-wise mean of per-query curves sampled at the same ranks.
pub fn mean_pr_curve(curves: &[Vec<(f64, f64)>]) -> Vec<(f64, f64)> {
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    if len == 0 {
        return Vec::new();
    }
    let n = curves.len() as f64;
    (0..len)
        .map(|i| {
            let (r, p) = curves
                .iter()
                .fold((0.0, 0.0), |(r, p), c| (r + c[i].0, p + c[i].1));
            (r / n, p / n)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    /// `(T, mean P@T)` in request order.
    pub precision_at: Vec<(usize, f64)>,
    pub pr_curve: Vec<(f64, f64)>,
    pub valid_queries: usize,
    pub excluded_queries: usize,
}

/// Scores a batch of judgments. Queries without any relevant item are left out of every
/// metric and counted in `excluded_queries`.
pub fn evaluate(judgments: &[RelevanceJudgment], ts: &[usize], pr_points: usize) -> Result<EvalReport> {
    let mut aps = Vec::with_capacity(judgments.len());
    let mut p_sums = vec![0.0; ts.len()];
    let mut curves = Vec::new();
    let mut excluded = 0usize;
    for (q, j) in judgments.iter().enumerate() {
        let ap = match average_precision(&j.flags, j.total_relevant) {
            Ok(ap) => ap,
            Err(Error::UndefinedQuery) => {
                warn!("query {q} has no relevant database items; excluded");
                excluded += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        aps.push(ap);
        for (sum, &t) in p_sums.iter_mut().zip(ts) {
            *sum += precision_at_t(&j.flags, t)?;
        }
        if pr_points > 0 {
            curves.push(pr_curve(&j.flags, j.total_relevant, pr_points)?);
        }
    }
    let map = mean_average_precision(&aps)?;
    let valid = aps.len() as f64;
    Ok(EvalReport {
        map,
        precision_at: ts.iter().zip(&p_sums).map(|(&t, s)| (t, s / valid)).collect(),
        pr_curve: mean_pr_curve(&curves),
        valid_queries: aps.len(),
        excluded_queries: excluded,
    })
}

/// Label-equality judgments for full or truncated rankings, then [`evaluate`].
pub fn evaluate_rankings(
    rankings: &[Vec<usize>],
    query_labels: &[u32],
    db_labels: &[u32],
    ts: &[usize],
    pr_points: usize,
) -> Result<EvalReport> {
    if rankings.len() != query_labels.len() {
        return Err(Error::Dimension(format!(
            "{} rankings for {} queries",
            rankings.len(),
            query_labels.len()
        )));
    }
    let judgments = rankings
        .iter()
        .zip(query_labels)
        .map(|(r, &l)| RelevanceJudgment::from_labels(l, r, db_labels))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&judgments, ts, pr_points)
}
