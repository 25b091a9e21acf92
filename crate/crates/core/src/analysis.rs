//! Token-level and per-group diagnostics of how a prefix shifts
//! log-likelihoods.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label, Record};
use crate::error::{Error, Result};
use crate::prefixes::Prefix;
use crate::scoring::{sequence_ll, ScoringBackend, TokenScores};

/// Target group and prefix membership, written `target|prefix`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "M|M")]
    MemberGivenMember,
    #[serde(rename = "M|NM")]
    MemberGivenNonmember,
    #[serde(rename = "NM|M")]
    NonmemberGivenMember,
    #[serde(rename = "NM|NM")]
    NonmemberGivenNonmember,
}

impl Condition {
    pub fn of(group: Label, prefix: Label) -> Self {
        match (group, prefix) {
            (Label::Member, Label::Member) => Condition::MemberGivenMember,
            (Label::Member, Label::Nonmember) => Condition::MemberGivenNonmember,
            (Label::Nonmember, Label::Member) => Condition::NonmemberGivenMember,
            (Label::Nonmember, Label::Nonmember) => Condition::NonmemberGivenNonmember,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::MemberGivenMember => "M|M",
            Condition::MemberGivenNonmember => "M|NM",
            Condition::NonmemberGivenMember => "NM|M",
            Condition::NonmemberGivenNonmember => "NM|NM",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionDelta {
    pub position: usize,
    pub mean_delta_ll: f64,
    pub n_sequences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDeltaProfile {
    pub condition: Condition,
    pub positions: Vec<PositionDelta>,
    pub records_used: usize,
    /// Records whose conditional and unconditional target tokens differ.
    pub records_skipped: usize,
}

/// Per-token `logprob(x_i | P ⊕ x_<i) - logprob(x_i | x_<i)` of one record,
/// end-of-sequence excluded. `None` when the two tokenizations disagree.
pub fn token_deltas<B: ScoringBackend + ?Sized>(backend: &B, record: &Record, prefix: &Prefix) -> Result<Option<Vec<f64>>> {
    let uncond = backend.score_target("", &record.text)?;
    let cond = backend.score_target(prefix.text(), &record.text)?;
    Ok(aligned_deltas(&uncond, &cond))
}

fn visible_tokens(ts: &TokenScores) -> &[String] {
    &ts.tokens()[..ts.visible_logprobs().len()]
}

fn aligned_deltas(uncond: &TokenScores, cond: &TokenScores) -> Option<Vec<f64>> {
    if visible_tokens(uncond) != visible_tokens(cond) {
        return None;
    }
    Some(
        cond.visible_logprobs()
            .iter()
            .zip(uncond.visible_logprobs())
            .map(|(c, u)| c - u)
            .collect(),
    )
}

/// Averages per-position deltas over the records that reach each position.
pub fn mean_by_position(rows: &[Vec<f64>]) -> Vec<PositionDelta> {
    let len = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut sums = vec![0.0; len];
    let mut counts = vec![0usize; len];
    for row in rows {
        for (i, d) in row.iter().enumerate() {
            sums[i] += d;
            counts[i] += 1;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(position, (s, n))| PositionDelta {
            position,
            mean_delta_ll: s / n as f64,
            n_sequences: n,
        })
        .collect()
}

/// Token-level delta profile of one group of `dataset` under `prefix`.
pub fn token_delta_profile<B: ScoringBackend + ?Sized>(
    backend: &B,
    dataset: &Dataset,
    prefix: &Prefix,
    group: Label,
) -> Result<TokenDeltaProfile> {
    let records: Vec<&Record> = dataset.group(group).collect();
    if records.is_empty() {
        return Err(Error::Insufficient {
            what: "records in the requested group",
            needed: 1,
            available: 0,
        });
    }
    let deltas = records
        .par_iter()
        .map(|r| token_deltas(backend, r, prefix))
        .collect::<Result<Vec<_>>>()?;
    let skipped = deltas.iter().filter(|d| d.is_none()).count();
    if skipped > 0 {
        log::warn!("{skipped} record(s) skipped for tokenization mismatch");
    }
    let rows: Vec<Vec<f64>> = deltas.into_iter().flatten().collect();
    Ok(TokenDeltaProfile {
        condition: Condition::of(group, prefix.membership()),
        positions: mean_by_position(&rows),
        records_used: rows.len(),
        records_skipped: skipped,
    })
}

impl TokenDeltaProfile {
    /// Mean of `|mean_delta_ll|` over the first `fraction` of positions.
    pub fn head_magnitude(&self, fraction: f64) -> f64 {
        let k = self.slice_len(fraction);
        mean_abs(&self.positions[..k])
    }

    /// Mean of `|mean_delta_ll|` over the last `fraction` of positions.
    pub fn tail_magnitude(&self, fraction: f64) -> f64 {
        let k = self.slice_len(fraction);
        mean_abs(&self.positions[self.positions.len() - k..])
    }

    fn slice_len(&self, fraction: f64) -> usize {
        ((self.positions.len() as f64 * fraction).ceil() as usize).clamp(1, self.positions.len().max(1))
    }
}

fn mean_abs(p: &[PositionDelta]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    p.iter().map(|d| d.mean_delta_ll.abs()).sum::<f64>() / p.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordShift {
    pub id: String,
    pub label: Label,
    pub mean_ll_uncond: f64,
    pub mean_ll_cond: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupShift {
    pub group: Label,
    pub n: usize,
    pub mean_ll_uncond: f64,
    pub mean_ll_cond: f64,
    pub mean_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlShiftSummary {
    pub prefix_membership: Label,
    pub groups: Vec<GroupShift>,
    pub records: Vec<RecordShift>,
}

/// Per-group means of the unconditional and conditional mean LL and their
/// difference, with per-record rows.
pub fn ll_shift_summary<B: ScoringBackend + ?Sized>(backend: &B, dataset: &Dataset, prefix: &Prefix) -> Result<LlShiftSummary> {
    dataset.require_both_classes()?;
    let records = dataset
        .records()
        .par_iter()
        .map(|r| {
            let u = sequence_ll(&backend.score_target("", &r.text)?)?.mean_ll;
            let c = sequence_ll(&backend.score_target(prefix.text(), &r.text)?)?.mean_ll;
            Ok(RecordShift {
                id: r.id.clone(),
                label: r.label,
                mean_ll_uncond: u,
                mean_ll_cond: c,
                delta: c - u,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let groups = [Label::Member, Label::Nonmember]
        .into_iter()
        .map(|g| {
            let rows: Vec<&RecordShift> = records.iter().filter(|r| r.label == g).collect();
            let n = rows.len() as f64;
            GroupShift {
                group: g,
                n: rows.len(),
                mean_ll_uncond: rows.iter().map(|r| r.mean_ll_uncond).sum::<f64>() / n,
                mean_ll_cond: rows.iter().map(|r| r.mean_ll_cond).sum::<f64>() / n,
                mean_delta: rows.iter().map(|r| r.delta).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(LlShiftSummary {
        prefix_membership: prefix.membership(),
        groups,
        records,
    })
}

impl LlShiftSummary {
    pub fn group(&self, label: Label) -> &GroupShift {
        self.groups.iter().find(|g| g.group == label).expect("both groups are always present")
    }
}

#[derive(Serialize)]
struct ProfileRow<'a> {
    position: usize,
    condition: &'a str,
    mean_delta_ll: f64,
    n: usize,
}

/// Writes `position,condition,mean_delta_ll,n` rows for every profile.
pub fn write_profiles_csv<W: Write>(profiles: &[TokenDeltaProfile], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in profiles {
        for d in &p.positions {
            w.serialize(ProfileRow {
                position: d.position,
                condition: p.condition.as_str(),
                mean_delta_ll: d.mean_delta_ll,
                n: d.n_sequences,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Plot-ready JSON holding the profiles and, optionally, LL shift summaries.
pub fn plot_data_json(profiles: &[TokenDeltaProfile], shifts: &[LlShiftSummary]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&serde_json::json!({
        "token_delta_profiles": profiles,
        "ll_shift": shifts,
    }))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngram::{geometric_weights, NgramBackend, NgramModel};
    use crate::prefixes::build_prefix;
    use crate::scoring::UniformByteBackend;
    use std::sync::Arc;

    fn rec(id: &str, text: &str, label: Label) -> Record {
        Record::new(id, text, label)
    }

    fn dataset() -> Dataset {
        Dataset::new(
            vec![
                rec("m1", "the cat sat", Label::Member),
                rec("m2", "the cat", Label::Member),
                rec("n1", "a dog ran off", Label::Nonmember),
                rec("n2", "dogs", Label::Nonmember),
            ],
            "t",
        )
        .unwrap()
    }

    fn prefix() -> Prefix {
        build_prefix(vec![rec("p", "some other words", Label::Nonmember)], "\n\n").unwrap()
    }

    #[test]
    fn memoryless_backend_gives_zero_deltas() {
        let p = token_delta_profile(&UniformByteBackend, &dataset(), &prefix(), Label::Member).unwrap();
        assert_eq!(p.condition, Condition::MemberGivenNonmember);
        assert!(p.positions.iter().all(|d| d.mean_delta_ll == 0.0));
        let s = ll_shift_summary(&UniformByteBackend, &dataset(), &prefix()).unwrap();
        assert!(s.records.iter().all(|r| r.delta == 0.0));
    }

    #[test]
    fn order_one_model_ignores_context() {
        let d = dataset();
        let model = NgramModel::train(d.records().iter().map(|r| r.text.as_str()), 1, 0.1, geometric_weights(1)).unwrap();
        let b = NgramBackend::new(Arc::new(model));
        let p = token_delta_profile(&b, &d, &prefix(), Label::Nonmember).unwrap();
        assert!(p.positions.iter().all(|x| x.mean_delta_ll == 0.0));
    }

    #[test]
    fn positions_and_dropout() {
        let d = Dataset::new(vec![rec("m", "abcd", Label::Member), rec("n", "x", Label::Nonmember)], "t").unwrap();
        let p = token_delta_profile(&UniformByteBackend, &d, &prefix(), Label::Member).unwrap();
        assert_eq!(p.positions.len(), 4);
        let p = token_delta_profile(&UniformByteBackend, &dataset(), &prefix(), Label::Member).unwrap();
        let n: Vec<usize> = p.positions.iter().map(|d| d.n_sequences).collect();
        assert_eq!(n.len(), 11);
        assert!(n.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!((n[0], n[6], n[7]), (2, 2, 1));
    }

    #[test]
    fn eos_is_excluded() {
        let d = dataset();
        let model = NgramModel::train(d.records().iter().map(|r| r.text.as_str()), 3, 0.1, geometric_weights(3)).unwrap();
        let b = NgramBackend::new(Arc::new(model));
        let p = token_delta_profile(&b, &d, &prefix(), Label::Member).unwrap();
        assert_eq!(p.positions.len(), "the cat sat".len());
    }

    #[test]
    fn mean_by_position_batch_matches_streaming() {
        let rows = vec![vec![0.1, -0.2, 0.3], vec![1e-3, 0.7], vec![-0.5], vec![0.25, 0.125, -0.0625, 2.0]];
        let batch = mean_by_position(&rows);
        let mut mean = [0.0f64; 4];
        let mut n = [0usize; 4];
        for row in &rows {
            for (i, d) in row.iter().enumerate() {
                n[i] += 1;
                mean[i] += (d - mean[i]) / n[i] as f64;
            }
        }
        for (b, (m, k)) in batch.iter().zip(mean.iter().zip(&n)) {
            assert!((b.mean_delta_ll - m).abs() <= 1e-12);
            assert_eq!(b.n_sequences, *k);
        }
    }

    #[test]
    fn group_means_are_weighted_consistent() {
        let d = dataset();
        let model = NgramModel::train(d.records().iter().map(|r| r.text.as_str()), 3, 0.1, geometric_weights(3)).unwrap();
        let b = NgramBackend::new(Arc::new(model));
        let s = ll_shift_summary(&b, &d, &prefix()).unwrap();
        let total: f64 = s.records.iter().map(|r| r.delta).sum();
        let weighted: f64 = s.groups.iter().map(|g| g.n as f64 * g.mean_delta).sum();
        assert!((total - weighted).abs() < 1e-12);
    }

    #[test]
    fn single_class_and_empty_group_rejected() {
        let d = Dataset::new(vec![rec("m", "abc", Label::Member)], "t").unwrap();
        assert!(ll_shift_summary(&UniformByteBackend, &d, &prefix()).is_err());
        assert!(token_delta_profile(&UniformByteBackend, &d, &prefix(), Label::Nonmember).is_err());
    }

    #[test]
    fn csv_and_json_outputs() {
        let p = token_delta_profile(&UniformByteBackend, &dataset(), &prefix(), Label::Member).unwrap();
        let mut buf = Vec::new();
        write_profiles_csv(std::slice::from_ref(&p), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("position,condition,mean_delta_ll,n\n0,M|NM,0.0,2\n"));
        let json: serde_json::Value = serde_json::from_str(&plot_data_json(&[p], &[]).unwrap()).unwrap();
        assert_eq!(json["token_delta_profiles"][0]["condition"], "M|NM");
    }
}
