//! Membership scores.
//!
//! Each attack keeps its textbook formula in `raw` and exposes a
//! `canonical` value oriented so that higher always means "more likely a
//! member". Loss-like scores (loss, reference, zlib, neighbor, min-k) are
//! negated; ratio and z-score style scores (recall, recall ensemble,
//! min-k++) are used as is.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::corpus::Record;
use crate::error::{Error, Result};
use crate::prefixes::Prefix;
use crate::scoring::{sequence_ll, LlMode, ScoringBackend, TokenScores};

/// zlib (RFC 1950) compression level used by [`zlib_score`].
pub const DEFLATE_LEVEL: u32 = 6;

/// Guard for a zero vocabulary standard deviation in min-k++.
pub const MINKPP_SIGMA_EPS: f64 = 1e-8;

/// `LL(x)` values at or above this are treated as certain.
pub const DEGENERATE_LL: f64 = -1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Loss,
    Reference,
    Zlib,
    Neighbor,
    Mink,
    Minkpp,
    Recall,
    RecallEnsemble,
}

impl AttackKind {
    pub const ALL: [AttackKind; 8] = [
        AttackKind::Loss,
        AttackKind::Reference,
        AttackKind::Zlib,
        AttackKind::Neighbor,
        AttackKind::Mink,
        AttackKind::Minkpp,
        AttackKind::Recall,
        AttackKind::RecallEnsemble,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Loss => "loss",
            AttackKind::Reference => "reference",
            AttackKind::Zlib => "zlib",
            AttackKind::Neighbor => "neighbor",
            AttackKind::Mink => "mink",
            AttackKind::Minkpp => "minkpp",
            AttackKind::Recall => "recall",
            AttackKind::RecallEnsemble => "recall_ensemble",
        }
    }

    /// Sign that maps `raw` onto the higher-is-member orientation.
    pub fn orientation(self) -> f64 {
        match self {
            AttackKind::Loss | AttackKind::Reference | AttackKind::Zlib | AttackKind::Neighbor | AttackKind::Mink => -1.0,
            AttackKind::Minkpp | AttackKind::Recall | AttackKind::RecallEnsemble => 1.0,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attack {s:?}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_percent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
}

impl AttackParams {
    pub fn k(k_percent: f64) -> Self {
        AttackParams {
            k_percent: Some(k_percent),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    pub attack: AttackKind,
    pub raw: f64,
    pub canonical: f64,
    pub params: AttackParams,
}

impl AttackScore {
    pub fn new(attack: AttackKind, raw: f64, params: AttackParams) -> Self {
        AttackScore {
            attack,
            raw,
            canonical: attack.orientation() * raw,
            params,
        }
    }
}

/// `LL(x|P) / LL(x)`.
pub fn recall_score(ll_cond: f64, ll_uncond: f64) -> Result<f64> {
    if !(ll_uncond < DEGENERATE_LL) {
        return Err(Error::DegenerateLL(ll_uncond));
    }
    Ok(ll_cond / ll_uncond)
}

/// Mean of per-group recall scores; the unconditional LL is computed once.
pub fn ensemble_recall<B: ScoringBackend + ?Sized>(backend: &B, x: &Record, groups: &[Prefix], mode: LlMode) -> Result<AttackScore> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one prefix group".into()));
    }
    let uncond = sequence_ll(&backend.score_target("", &x.text)?)?.value(mode);
    let mut total = 0.0;
    for (g, prefix) in groups.iter().enumerate() {
        let cond = backend.score_target(prefix.text(), &x.text).map_err(|e| match e {
            Error::ContextOverflow {
                context_tokens,
                target_tokens,
                limit,
                ..
            } => Error::ContextOverflow {
                context_tokens,
                target_tokens,
                limit,
                group: Some(g),
            },
            e => e,
        })?;
        total += recall_score(sequence_ll(&cond)?.value(mode), uncond)?;
    }
    let shots = groups.iter().map(|p| p.shots().len()).sum();
    Ok(AttackScore::new(
        AttackKind::RecallEnsemble,
        total / groups.len() as f64,
        AttackParams {
            shots: Some(shots),
            groups: Some(groups.len()),
            ..Default::default()
        },
    ))
}

/// Mean of `-logprob` over the given positions, summed in position order.
fn mean_neg_logprob(logprobs: &[f64], positions: impl Iterator<Item = usize>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in positions {
        sum += logprobs[i];
        n += 1;
    }
    -sum / n as f64
}

fn require_tokens(ts: &TokenScores) -> Result<()> {
    if ts.is_empty() {
        return Err(Error::InvalidArgument("attack needs at least one scored token".into()));
    }
    Ok(())
}

/// Per-token cross-entropy.
pub fn loss_score(ts: &TokenScores) -> Result<f64> {
    require_tokens(ts)?;
    Ok(mean_neg_logprob(ts.logprobs(), 0..ts.len()))
}

/// Target loss minus reference-model loss on the same record.
pub fn reference_score(target_id: &str, ts_target: &TokenScores, reference_id: &str, ts_ref: &TokenScores) -> Result<f64> {
    if target_id != reference_id {
        return Err(Error::InvalidArgument(format!(
            "reference scores belong to {reference_id}, target is {target_id}"
        )));
    }
    Ok(loss_score(ts_target)? - loss_score(ts_ref)?)
}

/// Length in bytes of the zlib stream of `bytes` at [`DEFLATE_LEVEL`].
pub fn compressed_size(bytes: &[u8]) -> usize {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(DEFLATE_LEVEL));
    enc.write_all(bytes).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail").len()
}

/// Loss divided by the zlib-compressed size of the text.
pub fn zlib_score(ts: &TokenScores, raw_text: &[u8]) -> Result<f64> {
    if raw_text.is_empty() {
        return Err(Error::InvalidArgument("zlib score needs non-empty text".into()));
    }
    Ok(loss_score(ts)? / compressed_size(raw_text) as f64)
}

/// Target loss minus the mean loss of its neighbors.
pub fn neighbor_score(ts: &TokenScores, neighbor_ts: &[TokenScores]) -> Result<f64> {
    if neighbor_ts.is_empty() {
        return Err(Error::InvalidArgument("neighbor attack needs at least one neighbor".into()));
    }
    let mut total = 0.0;
    for n in neighbor_ts {
        total += loss_score(n)?;
    }
    Ok(loss_score(ts)? - total / neighbor_ts.len() as f64)
}

fn check_k(k_percent: f64) -> Result<()> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!("k% must be in (0, 100], got {k_percent}")));
    }
    Ok(())
}

/// `max(1, floor(k/100 · n))`.
pub fn mink_count(k_percent: f64, n: usize) -> usize {
    ((k_percent / 100.0 * n as f64).floor() as usize).clamp(1, n.max(1))
}

/// Indices of the `m` lowest values, ties to the earlier position, returned
/// in position order.
fn lowest_positions(values: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx.truncate(m);
    idx.sort_unstable();
    idx
}

/// Mean `-logprob` of the k% least likely tokens.
pub fn mink_score(ts: &TokenScores, k_percent: f64) -> Result<f64> {
    require_tokens(ts)?;
    check_k(k_percent)?;
    let m = mink_count(k_percent, ts.len());
    let positions = lowest_positions(ts.logprobs(), m);
    Ok(mean_neg_logprob(ts.logprobs(), positions.into_iter()))
}

/// Per-token `(logprob − μ) / max(σ, ε)` as used by min-k++.
pub fn minkpp_token_scores(ts: &TokenScores) -> Option<Vec<f64>> {
    let moments = ts.moments()?;
    Some(
        ts.logprobs()
            .iter()
            .zip(moments)
            .map(|(lp, m)| (lp - m.mu) / m.sigma.max(MINKPP_SIGMA_EPS))
            .collect(),
    )
}

/// Mean of the k% lowest vocabulary-normalized token scores.
pub fn minkpp_score(ts: &TokenScores, k_percent: f64, backend_name: &str) -> Result<f64> {
    require_tokens(ts)?;
    check_k(k_percent)?;
    let scores = minkpp_token_scores(ts).ok_or_else(|| Error::UnsupportedCapability {
        backend: backend_name.to_string(),
        capability: "full_vocab_moments (required by minkpp)".into(),
    })?;
    let m = mink_count(k_percent, scores.len());
    let positions = lowest_positions(&scores, m);
    Ok(positions.iter().map(|&i| scores[i]).sum::<f64>() / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::Moments;

    fn ts(lps: &[f64]) -> TokenScores {
        TokenScores::from_logprobs(lps.to_vec()).unwrap()
    }

    #[test]
    fn recall_worked_examples() {
        assert!((recall_score(-4.0, -3.0).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        assert!((recall_score(-3.3, -3.0).unwrap() - 1.1).abs() < 1e-12);
        assert_eq!(recall_score(-5.0, -5.0).unwrap(), 1.0);
    }

    #[test]
    fn recall_rejects_near_certain_uncond() {
        assert!(matches!(recall_score(-1.0, 0.0), Err(Error::DegenerateLL(_))));
        assert!(recall_score(-1.0, -1e-13).is_err());
        assert!(recall_score(-1.0, f64::NAN).is_err());
    }

    #[test]
    fn recall_is_scale_invariant() {
        let base = recall_score(-2.7, -1.9).unwrap();
        for c in [0.5, 3.0, 257.0] {
            assert!((recall_score(-2.7 * c, -1.9 * c).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn orientation_table() {
        for a in AttackKind::ALL {
            let s = AttackScore::new(a, 2.0, AttackParams::default());
            let expected = match a {
                AttackKind::Recall | AttackKind::RecallEnsemble | AttackKind::Minkpp => 2.0,
                _ => -2.0,
            };
            assert_eq!(s.canonical, expected, "{a}");
            assert_eq!(a.as_str().parse::<AttackKind>().unwrap(), a);
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_score(&ts(&[-1.0, -2.0, -3.0])).unwrap(), 2.0);
        assert_eq!(loss_score(&ts(&[0.0, 0.0])).unwrap(), 0.0);
        assert!(loss_score(&ts(&[])).is_err());
    }

    #[test]
    fn reference_examples() {
        let a = ts(&[-2.0, -2.0]);
        assert_eq!(reference_score("r", &a, "r", &a).unwrap(), 0.0);
        let t = ts(&[-1.5]);
        let r = ts(&[-2.5]);
        let raw = reference_score("r", &t, "r", &r).unwrap();
        assert_eq!(raw, -1.0);
        assert_eq!(AttackScore::new(AttackKind::Reference, raw, AttackParams::default()).canonical, 1.0);
        assert!(reference_score("a", &t, "b", &r).is_err());
    }

    #[test]
    fn zlib_examples() {
        let text = b"the quick brown fox jumps over";
        let size = compressed_size(text);
        let raw = zlib_score(&ts(&[-2.0, -2.0]), text).unwrap();
        assert_eq!(raw, 2.0 / size as f64);
        assert_eq!(compressed_size(text), size);
        assert!(zlib_score(&ts(&[-1.0]), b"").is_err());
    }

    #[test]
    fn zlib_golden_size_of_repeated_a() {
        // measured with Python's zlib.compress(b"a" * 100, 6)
        assert_eq!(compressed_size(&[b'a'; 100]), 12);
    }

    #[test]
    fn neighbor_examples() {
        let n2 = ts(&[-2.0]);
        assert_eq!(neighbor_score(&ts(&[-2.0]), &[n2.clone(), n2]).unwrap(), 0.0);
        let raw = neighbor_score(&ts(&[-1.0]), &[ts(&[-2.0]), ts(&[-4.0])]).unwrap();
        assert_eq!(raw, -2.0);
        assert_eq!(AttackScore::new(AttackKind::Neighbor, raw, AttackParams::default()).canonical, 2.0);
        let me = ts(&[-0.3, -1.7]);
        assert_eq!(neighbor_score(&me, std::slice::from_ref(&me)).unwrap(), 0.0);
        assert!(neighbor_score(&me, &[]).is_err());
    }

    #[test]
    fn mink_examples() {
        assert_eq!(mink_score(&ts(&[-1.0, -3.0, -2.0, -4.0]), 50.0).unwrap(), 3.5);
        assert_eq!(mink_score(&ts(&[-0.7]), 5.0).unwrap(), 0.7);
        let t = ts(&[-0.1, -0.2, -0.30000000000000004, -7.25]);
        assert_eq!(mink_score(&t, 100.0).unwrap().to_bits(), loss_score(&t).unwrap().to_bits());
        assert!(mink_score(&t, 0.0).is_err());
        assert!(mink_score(&t, 100.5).is_err());
    }

    #[test]
    fn mink_ties_prefer_earlier_positions() {
        assert_eq!(lowest_positions(&[-1.0, -2.0, -2.0, -2.0], 2), vec![1, 2]);
        assert_eq!(mink_count(20.0, 4), 1);
        assert_eq!(mink_count(20.0, 10), 2);
        assert_eq!(mink_count(100.0, 3), 3);
    }

    #[test]
    fn minkpp_centered_and_degenerate() {
        let t = ts(&[-2.0, -1.0])
            .with_moments(vec![Moments { mu: -2.0, sigma: 0.5 }, Moments { mu: -3.0, sigma: 1.0 }])
            .unwrap();
        assert_eq!(minkpp_token_scores(&t).unwrap(), vec![0.0, 2.0]);
        assert_eq!(minkpp_score(&t, 50.0, "x").unwrap(), 0.0);
        assert_eq!(minkpp_score(&t, 100.0, "x").unwrap(), 1.0);

        let lp = (1.0f64 / 257.0).ln();
        let flat = ts(&[lp, lp, lp]).with_moments(vec![Moments { mu: lp, sigma: 0.0 }; 3]).unwrap();
        assert_eq!(minkpp_score(&flat, 20.0, "x").unwrap(), 0.0);
    }

    #[test]
    fn minkpp_requires_moments() {
        let err = minkpp_score(&ts(&[-1.0]), 20.0, "remote(m)").unwrap_err();
        match err {
            Error::UnsupportedCapability { backend, .. } => assert_eq!(backend, "remote(m)"),
            e => panic!("unexpected {e}"),
        }
    }
}
