//! Pareto fronts, 2-D hypervolume, and architecture-choice probabilities
//! among the most accurate measured sub-networks.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::archspace::{display_gb, ArchGenome, SearchSpaceSpec};
use crate::error::{NasError, Result};
use crate::linas::{EvalRecord, SearchHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontPoint {
    pub genome: ArchGenome,
    pub size_bytes: u64,
    pub accuracy: f64,
}

/// Non-dominated measured records, size ascending with strictly increasing
/// accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub source: String,
    pub points: Vec<FrontPoint>,
}

/// Maximal measured records under (min size, max accuracy). Ties in both
/// objectives keep the genome with the smallest text form, so the result
/// does not depend on history order.
pub fn pareto_front(history: &SearchHistory) -> Result<ParetoFront> {
    let mut cand: Vec<(&EvalRecord, String)> = history
        .measured()
        .map(|r| (r, r.genome.to_string()))
        .collect();
    if cand.is_empty() {
        return Err(NasError::EmptySubset(format!(
            "history '{}' has no measured records",
            history.id
        )));
    }
    if let Some((r, _)) = cand.iter().find(|(r, _)| !r.accuracy.is_finite()) {
        return Err(NasError::NonFinite(format!("accuracy of {}", r.genome)));
    }
    cand.sort_by(|(a, ta), (b, tb)| {
        a.size_bytes
            .cmp(&b.size_bytes)
            .then(b.accuracy.total_cmp(&a.accuracy))
            .then(ta.cmp(tb))
    });
    let mut points = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for (r, _) in cand {
        if r.accuracy > best {
            best = r.accuracy;
            points.push(FrontPoint {
                genome: r.genome.clone(),
                size_bytes: r.size_bytes,
                accuracy: r.accuracy,
            });
        }
    }
    Ok(ParetoFront {
        source: history.id.clone(),
        points,
    })
}

/// Reference point `(1.1 * largest measured size, 0)`.
pub fn hv_reference(history: &SearchHistory) -> Result<(f64, f64)> {
    history
        .measured()
        .map(|r| r.size_bytes)
        .max()
        .map(|m| (1.1 * m as f64, 0.0))
        .ok_or_else(|| NasError::EmptySubset("no measured records for a reference point".into()))
}

/// Area dominated by `points` inside the box bounded by `reference`
/// (`size <= size_ref`, `accuracy >= acc_ref`).
pub fn hypervolume_2d(points: &[FrontPoint], reference: (f64, f64)) -> Result<f64> {
    let (size_ref, acc_ref) = reference;
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for p in points {
        let s = p.size_bytes as f64;
        if !(s <= size_ref && p.accuracy >= acc_ref) {
            return Err(NasError::InvalidInput(format!(
                "point ({s}, {}) outside reference box ({size_ref}, {acc_ref})",
                p.accuracy
            )));
        }
        pts.push((s, p.accuracy));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut area = 0.0;
    let mut best = acc_ref;
    for (k, &(s, a)) in pts.iter().enumerate() {
        best = best.max(a);
        let next = pts.get(k + 1).map_or(size_ref, |p| p.0);
        area += (next - s) * (best - acc_ref);
    }
    Ok(area)
}

/// Linear-interpolation quantile of unsorted data, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Records with accuracy at or above the `(100 - p)`-th percentile.
fn upper_percentile<'a>(records: &[&'a EvalRecord], p: f64) -> Result<(Vec<&'a EvalRecord>, f64)> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(NasError::InvalidInput(format!("percentile {p} outside (0, 100]")));
    }
    if records.is_empty() {
        return Err(NasError::EmptySubset("no measured records".into()));
    }
    let acc: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    let threshold = if p == 100.0 {
        f64::NEG_INFINITY
    } else {
        quantile(&acc, 1.0 - p / 100.0)
    };
    let kept: Vec<_> = records.iter().copied().filter(|r| r.accuracy >= threshold).collect();
    if kept.is_empty() {
        return Err(NasError::EmptySubset(format!(
            "no record reaches accuracy threshold {threshold} (p={p}, n={})",
            records.len()
        )));
    }
    Ok((kept, threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityTable {
    pub percentile: f64,
    /// Set for per-layer width tables.
    pub layer_count: Option<usize>,
    /// 1-based layer index for per-layer width tables.
    pub layer_index: Option<usize>,
    pub threshold: f64,
    pub n_selected: usize,
    /// `(choice value, probability)`, one row per choice in space order.
    pub rows: Vec<(usize, f64)>,
}

fn distribution(choices: &[usize], values: impl Iterator<Item = usize>) -> Vec<(usize, f64)> {
    let mut counts = vec![0usize; choices.len()];
    let mut n = 0;
    for v in values {
        if let Some(i) = choices.iter().position(|&c| c == v) {
            counts[i] += 1;
            n += 1;
        }
    }
    choices
        .iter()
        .zip(counts)
        .map(|(&c, k)| (c, k as f64 / n as f64))
        .collect()
}

/// Layer-count distribution among the top `p` percent of measured records.
pub fn layer_count_probs(history: &SearchHistory, space: &SearchSpaceSpec, p: f64) -> Result<ProbabilityTable> {
    let all: Vec<&EvalRecord> = history.measured().collect();
    let (kept, threshold) = upper_percentile(&all, p)?;
    Ok(ProbabilityTable {
        percentile: p,
        layer_count: None,
        layer_index: None,
        threshold,
        n_selected: kept.len(),
        rows: distribution(&space.layer_choices, kept.iter().map(|r| r.genome.layer_count)),
    })
}

/// Per-layer width distributions among `layer_count`-layer records, with
/// the percentile taken inside that stratum. One table per active layer.
pub fn inter_size_probs(
    history: &SearchHistory,
    space: &SearchSpaceSpec,
    layer_count: usize,
    p: f64,
) -> Result<Vec<ProbabilityTable>> {
    let stratum: Vec<&EvalRecord> = history
        .measured()
        .filter(|r| r.genome.layer_count == layer_count)
        .collect();
    if stratum.is_empty() {
        return Err(NasError::EmptySubset(format!(
            "no measured {layer_count}-layer records (p={p})"
        )));
    }
    let (kept, threshold) = upper_percentile(&stratum, p)?;
    Ok((0..layer_count)
        .map(|i| ProbabilityTable {
            percentile: p,
            layer_count: Some(layer_count),
            layer_index: Some(i + 1),
            threshold,
            n_selected: kept.len(),
            rows: distribution(&space.inter_choices, kept.iter().map(|r| r.genome.inter_sizes[i])),
        })
        .collect())
}

/// Distinct phenotypes among measured records.
pub fn unique_phenotypes(history: &SearchHistory, space: &SearchSpaceSpec) -> Result<usize> {
    let mut set = HashSet::new();
    for r in history.measured() {
        set.insert(r.genome.phenotype(space)?);
    }
    Ok(set.len())
}

pub fn front_csv(front: &ParetoFront) -> String {
    let mut s = String::from("size_bytes,display_gb,accuracy,genome\n");
    for p in &front.points {
        let _ = writeln!(s, "{},{:.1},{},\"{}\"", p.size_bytes, display_gb(p.size_bytes), p.accuracy, p.genome);
    }
    s
}

pub fn layer_probs_csv(tables: &[ProbabilityTable]) -> String {
    let mut s = String::from("percentile,layer_count,probability\n");
    for t in tables {
        for (v, prob) in &t.rows {
            let _ = writeln!(s, "{},{v},{prob}", t.percentile);
        }
    }
    s
}

pub fn inter_probs_csv(tables: &[ProbabilityTable]) -> String {
    let mut s = String::from("layer_index,inter_size,probability\n");
    for t in tables {
        for (v, prob) in &t.rows {
            let _ = writeln!(s, "{},{v},{prob}", t.layer_index.unwrap_or(0));
        }
    }
    s
}
