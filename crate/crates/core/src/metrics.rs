//! ROC, AUC and TPR at a fixed FPR over canonical scores (members are the
//! positive class).

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

/// A canonical score with its ground-truth label.
pub type LabeledScore = (f64, Label);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called members; `+inf` for the origin.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

fn class_counts(scores: &[LabeledScore]) -> Result<(usize, usize)> {
    if let Some((s, _)) = scores.iter().find(|(s, _)| s.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {s} is not a number")));
    }
    let pos = scores.iter().filter(|(_, l)| l.is_member()).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "metrics need both classes, got {pos} members / {neg} nonmembers"
        )));
    }
    Ok((pos, neg))
}

/// Empirical ROC with one point per distinct score, from (0,0) to (1,1).
pub fn roc_curve(scores: &[LabeledScore]) -> Result<RocCurve> {
    let (pos, neg) = class_counts(scores)?;
    let mut sorted: Vec<LabeledScore> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1.is_member() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold,
        });
    }
    Ok(RocCurve { points })
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }
}

/// Mann–Whitney AUC: the share of (member, nonmember) pairs where the member
/// scores higher, ties counting one half. Computed from midranks.
pub fn auc(scores: &[LabeledScore]) -> Result<f64> {
    let (pos, neg) = class_counts(scores)?;
    let mut sorted: Vec<LabeledScore> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        let members = sorted[i..j].iter().filter(|(_, l)| l.is_member()).count();
        rank_sum += midrank * members as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Highest TPR over ROC points with FPR at most `fpr_cap`, no interpolation.
pub fn tpr_at_fpr(scores: &[LabeledScore], fpr_cap: f64) -> Result<f64> {
    if !(fpr_cap > 0.0 && fpr_cap < 1.0) {
        return Err(Error::InvalidArgument(format!("FPR cap {fpr_cap} must be in (0, 1)")));
    }
    let curve = roc_curve(scores)?;
    // FPRs are multiples of 1/N; compare counts to avoid rounding at the cap
    let (_, neg) = class_counts(scores)?;
    let max_fp = (fpr_cap * neg as f64 + 1e-9).floor();
    Ok(curve
        .points
        .iter()
        .filter(|p| (p.fpr * neg as f64).round() <= max_fp)
        .map(|p| p.tpr)
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepStatus {
    Ok,
    Overflow,
    Error,
}

/// Per-shot-count outcome fed to [`shot_sweep_report`].
#[derive(Debug, Clone)]
pub enum ShotOutcome {
    Scored(Vec<LabeledScore>),
    Overflow,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_shots: usize,
    pub status: SweepStatus,
    pub auc: Option<f64>,
    pub tpr_at_1pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Shot count with the highest AUC; ties go to fewer shots.
    pub best_n_shots: Option<usize>,
}

/// One row per shot count, ordered by shot count, plus the best-AUC marker.
pub fn shot_sweep_report(results: Vec<(usize, ShotOutcome)>) -> Result<SweepTable> {
    let mut results = results;
    results.sort_by_key(|(n, _)| *n);
    let mut rows = Vec::with_capacity(results.len());
    for (n_shots, outcome) in results {
        rows.push(match outcome {
            ShotOutcome::Scored(scores) => SweepRow {
                n_shots,
                status: SweepStatus::Ok,
                auc: Some(auc(&scores)?),
                tpr_at_1pct: Some(tpr_at_fpr(&scores, 0.01)?),
                note: None,
            },
            ShotOutcome::Overflow => SweepRow {
                n_shots,
                status: SweepStatus::Overflow,
                auc: None,
                tpr_at_1pct: None,
                note: Some("prefix and target exceed the backend context limit".into()),
            },
            ShotOutcome::Failed(msg) => SweepRow {
                n_shots,
                status: SweepStatus::Error,
                auc: None,
                tpr_at_1pct: None,
                note: Some(msg),
            },
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for row in &rows {
        if let Some(a) = row.auc {
            if best.is_none_or(|(_, b)| a > b) {
                best = Some((row.n_shots, a));
            }
        }
    }
    Ok(SweepTable {
        rows,
        best_n_shots: best.map(|(n, _)| n),
    })
}
