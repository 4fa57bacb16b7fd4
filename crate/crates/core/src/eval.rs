//! Threshold-independent detection metrics.
//!
//! AUC is the Mann-Whitney probability that a random anomalous clip scores
//! higher than a random normal clip (ties count one half). pAUC is the ROC
//! area over false-positive rates `[0, p]`, divided by `p`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::geometry::UnitVector;

/// The false-positive range used for pAUC throughout.
pub const DEFAULT_P: f64 = 0.1;

fn check_nonempty(normals: &[f64], anomalies: &[f64]) -> Result<()> {
    if normals.is_empty() || anomalies.is_empty() {
        return Err(Error::Empty("AUC needs normal and anomalous scores".into()));
    }
    if normals.iter().chain(anomalies).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score is NaN".into()));
    }
    Ok(())
}

/// Area under the ROC curve.
pub fn auc(normals: &[f64], anomalies: &[f64]) -> Result<f64> {
    check_nonempty(normals, anomalies)?;
    // Rank-sum over the pooled scores with mid-ranks for ties.
    let mut pooled: Vec<(f64, bool)> = normals
        .iter()
        .map(|s| (*s, false))
        .chain(anomalies.iter().map(|s| (*s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * pooled[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let (n_pos, n_neg) = (anomalies.len() as f64, normals.len() as f64);
    Ok(((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)).clamp(0.0, 1.0))
}

/// ROC vertices `(fpr, tpr)` from the highest threshold down; tied scores
/// produce a single diagonal step.
fn roc_points(normals: &[f64], anomalies: &[f64]) -> Vec<(f64, f64)> {
    let mut pooled: Vec<(f64, bool)> = normals
        .iter()
        .map(|s| (*s, false))
        .chain(anomalies.iter().map(|s| (*s, true)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n_pos, n_neg) = (anomalies.len() as f64, normals.len() as f64);
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pooled.len() {
        let s = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == s {
            if pooled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / n_neg, tp as f64 / n_pos));
    }
    pts
}

/// Partial ROC area over `fpr in [0, p]`, linearly interpolated at `p` and
/// divided by `p`.
pub fn pauc(normals: &[f64], anomalies: &[f64], p: f64) -> Result<f64> {
    check_nonempty(normals, anomalies)?;
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParameter(format!("pAUC range {p} not in (0, 1]")));
    }
    let pts = roc_points(normals, anomalies);
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= p {
            break;
        }
        if x1 <= p {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let yp = y0 + (y1 - y0) * (p - x0) / (x1 - x0);
            area += (p - x0) * (y0 + yp) / 2.0;
        }
    }
    Ok((area / p).clamp(0.0, 1.0))
}

/// `n / sum(1 / v)`; every value must be positive.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("harmonic mean of nothing".into()));
    }
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter(
            "harmonic mean needs positive values".into(),
        ));
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

/// Like [`harmonic_mean`] but a zero anywhere gives zero (the limit) and an
/// empty list gives `None`.
fn summary_hmean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else if values.iter().any(|v| *v <= 0.0) {
        Some(0.0)
    } else {
        harmonic_mean(values).ok()
    }
}

/// One scored test clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub score: f64,
    pub is_anomalous: bool,
    pub section: String,
    pub domain: Domain,
}

pub type ScoredSet = Vec<ScoredEntry>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub auc: f64,
    pub pauc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionMetrics {
    pub section: String,
    /// `None` when a slice lacks normal or anomalous clips.
    pub source: Option<SliceMetrics>,
    pub target: Option<SliceMetrics>,
    /// Source and target pooled, i.e. one threshold for both domains.
    pub both: Option<SliceMetrics>,
}

/// Harmonic means over sections, one per table column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicMeans {
    pub source_auc: Option<f64>,
    pub source_pauc: Option<f64>,
    pub target_auc: Option<f64>,
    pub target_pauc: Option<f64>,
    pub both_auc: Option<f64>,
    pub both_pauc: Option<f64>,
    /// Over every source AUC, target AUC and pooled pAUC of all sections.
    pub overall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub p: f64,
    pub sections: Vec<SectionMetrics>,
    pub hmean: HarmonicMeans,
}

fn slice(entries: &[&ScoredEntry], p: f64) -> Result<Option<SliceMetrics>> {
    let normals: Vec<f64> = entries.iter().filter(|e| !e.is_anomalous).map(|e| e.score).collect();
    let anomalies: Vec<f64> = entries.iter().filter(|e| e.is_anomalous).map(|e| e.score).collect();
    if normals.is_empty() || anomalies.is_empty() {
        return Ok(None);
    }
    Ok(Some(SliceMetrics {
        auc: auc(&normals, &anomalies)?,
        pauc: pauc(&normals, &anomalies, p)?,
    }))
}

/// Per-section AUC/pAUC for each domain and both pooled, plus harmonic means.
pub fn evaluate(scores: &[ScoredEntry], p: f64) -> Result<MetricsReport> {
    let mut by_section: BTreeMap<&str, Vec<&ScoredEntry>> = BTreeMap::new();
    for e in scores {
        by_section.entry(e.section.as_str()).or_default().push(e);
    }
    let mut sections = Vec::with_capacity(by_section.len());
    for (name, entries) in by_section {
        let src: Vec<_> = entries.iter().copied().filter(|e| e.domain == Domain::Source).collect();
        let tgt: Vec<_> = entries.iter().copied().filter(|e| e.domain == Domain::Target).collect();
        sections.push(SectionMetrics {
            section: name.to_string(),
            source: slice(&src, p)?,
            target: slice(&tgt, p)?,
            both: slice(&entries, p)?,
        });
    }
    let column = |f: &dyn Fn(&SectionMetrics) -> Option<f64>| -> Vec<f64> {
        sections.iter().filter_map(f).collect()
    };
    let mut overall = column(&|s| s.source.map(|m| m.auc));
    overall.extend(column(&|s| s.target.map(|m| m.auc)));
    overall.extend(column(&|s| s.both.map(|m| m.pauc)));
    let hmean = HarmonicMeans {
        source_auc: summary_hmean(&column(&|s| s.source.map(|m| m.auc))),
        source_pauc: summary_hmean(&column(&|s| s.source.map(|m| m.pauc))),
        target_auc: summary_hmean(&column(&|s| s.target.map(|m| m.auc))),
        target_pauc: summary_hmean(&column(&|s| s.target.map(|m| m.pauc))),
        both_auc: summary_hmean(&column(&|s| s.both.map(|m| m.auc))),
        both_pauc: summary_hmean(&column(&|s| s.both.map(|m| m.pauc))),
        overall: summary_hmean(&overall),
    };
    Ok(MetricsReport { p, sections, hmean })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per section plus a final `hmean` row; absent cells are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record([
            "section",
            "source_auc",
            "source_pauc",
            "target_auc",
            "target_pauc",
            "both_auc",
            "both_pauc",
        ])
        .map_err(csv_err)?;
        for s in &self.sections {
            w.write_record([
                s.section.clone(),
                cell(s.source.map(|m| m.auc)),
                cell(s.source.map(|m| m.pauc)),
                cell(s.target.map(|m| m.auc)),
                cell(s.target.map(|m| m.pauc)),
                cell(s.both.map(|m| m.auc)),
                cell(s.both.map(|m| m.pauc)),
            ])
            .map_err(csv_err)?;
        }
        let h = &self.hmean;
        w.write_record([
            "hmean".to_string(),
            cell(h.source_auc),
            cell(h.source_pauc),
            cell(h.target_auc),
            cell(h.target_pauc),
            cell(h.both_auc),
            cell(h.both_pauc),
        ])
        .map_err(csv_err)?;
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, json_path: &Path, csv_path: Option<&Path>) -> Result<()> {
        std::fs::write(json_path, self.to_json()).map_err(|e| Error::io(json_path, e))?;
        if let Some(p) = csv_path {
            let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            self.write_csv(f)?;
        }
        Ok(())
    }
}

/// Distance from each anomalous embedding to its closest normal embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub per_anomaly: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn nearest_normal_distances(
    anomalies: &[UnitVector],
    normals: &[UnitVector],
) -> Result<DistanceReport> {
    if anomalies.is_empty() || normals.is_empty() {
        return Err(Error::Empty("distance report needs both sets".into()));
    }
    let per_anomaly: Vec<f64> = anomalies
        .iter()
        .map(|a| {
            normals
                .iter()
                .map(|n| crate::geometry::sq_dist(a, n))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    let k = per_anomaly.len() as f64;
    let mean = per_anomaly.iter().sum::<f64>() / k;
    let std = (per_anomaly.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / k).sqrt();
    Ok(DistanceReport {
        per_anomaly,
        mean,
        std,
    })
}
