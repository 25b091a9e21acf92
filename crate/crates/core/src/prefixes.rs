//! Conditioning prefixes: fixed pools, shot sweeps, TF-IDF dynamic
//! selection and ensemble groupings.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{draw_indices, Label, PrefixPool, Record};
use crate::error::{Error, Result};

pub const DEFAULT_SEPARATOR: &str = "\n\n";

/// Shots joined as `p1 ⊕ sep ⊕ p2 ⊕ … ⊕ pn ⊕ sep`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Prefix {
    shots: Vec<Record>,
    separator: String,
    text: String,
}

impl Prefix {
    fn assemble(shots: Vec<Record>, separator: &str) -> Result<Self> {
        if shots.is_empty() {
            return Err(Error::InvalidArgument("a prefix needs at least one shot".into()));
        }
        let mut text = String::with_capacity(shots.iter().map(|s| s.text.len() + separator.len()).sum());
        for shot in &shots {
            text.push_str(&shot.text);
            text.push_str(separator);
        }
        Ok(Prefix {
            shots,
            separator: separator.to_string(),
            text,
        })
    }

    /// A prefix whose text is used verbatim, e.g. an externally generated
    /// synthetic passage.
    pub fn verbatim(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.is_empty() {
            return Err(Error::InvalidArgument("prefix text is empty".into()));
        }
        Self::assemble(vec![Record::new(id, text, Label::Nonmember)], "")
    }

    pub fn shots(&self) -> &[Record] {
        &self.shots
    }

    pub fn separator(&self) -> &str {
        &self.separator
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn shot_ids(&self) -> Vec<String> {
        self.shots.iter().map(|s| s.id.clone()).collect()
    }

    /// `Member` when every shot is a member, otherwise `Nonmember`.
    pub fn membership(&self) -> Label {
        if self.shots.iter().all(|s| s.label == Label::Member) {
            Label::Member
        } else {
            Label::Nonmember
        }
    }
}

/// Builds a nonmember prefix; any member shot is an error.
pub fn build_prefix(shots: Vec<Record>, separator: &str) -> Result<Prefix> {
    if let Some(r) = shots.iter().find(|r| r.label != Label::Nonmember) {
        return Err(Error::InvalidArgument(format!(
            "shot {} is a member; member prefixes need the explicit override",
            r.id
        )));
    }
    Prefix::assemble(shots, separator)
}

/// Builds a prefix without the nonmember check. Only for member-vs-nonmember
/// prefix comparisons.
pub fn build_prefix_allowing_members(shots: Vec<Record>, separator: &str) -> Result<Prefix> {
    Prefix::assemble(shots, separator)
}

/// Nested prefixes over the first `n` pool shots for `n = 1..=n_max`.
pub fn sweep_shot_counts(pool: &PrefixPool, n_max: usize, separator: &str) -> Result<Vec<Prefix>> {
    if n_max > pool.len() {
        return Err(Error::Insufficient {
            what: "pool shots for the sweep",
            needed: n_max,
            available: pool.len(),
        });
    }
    (1..=n_max)
        .map(|n| build_prefix(pool.shots()[..n].to_vec(), separator))
        .collect()
}

/// Splits shots into `g` contiguous groups whose sizes differ by at most
/// one; earlier groups take the remainder.
pub fn group_shots(shots: &[Record], g: usize) -> Result<Vec<Vec<Record>>> {
    if g == 0 || g > shots.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} shots into {g} groups",
            shots.len()
        )));
    }
    let base = shots.len() / g;
    let extra = shots.len() % g;
    let mut out = Vec::with_capacity(g);
    let mut start = 0;
    for i in 0..g {
        let size = base + usize::from(i < extra);
        out.push(shots[start..start + size].to_vec());
        start += size;
    }
    Ok(out)
}

/// Lowercased maximal alphanumeric runs.
pub fn tfidf_terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Sparse L2-normalized vector: (column, weight), sorted by column.
pub type SparseVector = Vec<(usize, f64)>;

/// TF-IDF index with raw term frequency, smooth idf
/// `ln((1 + N) / (1 + df)) + 1` and L2-normalized document vectors.
#[derive(Debug, Clone)]
pub struct TfidfIndex {
    vocabulary: BTreeMap<String, usize>,
    idf: Vec<f64>,
    doc_vectors: Vec<SparseVector>,
    doc_ids: HashMap<String, usize>,
}

pub fn build_tfidf(corpus: &[Record]) -> Result<TfidfIndex> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("TF-IDF corpus is empty".into()));
    }
    let docs: Vec<Vec<String>> = corpus.iter().map(|r| tfidf_terms(&r.text)).collect();
    let mut vocabulary = BTreeMap::new();
    for term in docs.iter().flatten() {
        let next = vocabulary.len();
        vocabulary.entry(term.clone()).or_insert(next);
    }
    let mut df = vec![0usize; vocabulary.len()];
    for doc in &docs {
        let mut cols: Vec<usize> = doc.iter().map(|t| vocabulary[t]).collect();
        cols.sort_unstable();
        cols.dedup();
        for c in cols {
            df[c] += 1;
        }
    }
    let n = corpus.len() as f64;
    let idf = df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
    let mut index = TfidfIndex {
        vocabulary,
        idf,
        doc_vectors: Vec::with_capacity(corpus.len()),
        doc_ids: HashMap::with_capacity(corpus.len()),
    };
    for (i, (record, doc)) in corpus.iter().zip(&docs).enumerate() {
        let v = index.vectorize_terms(doc);
        index.doc_vectors.push(v);
        index.doc_ids.insert(record.id.clone(), i);
    }
    Ok(index)
}

impl TfidfIndex {
    pub fn idf(&self, term: &str) -> Option<f64> {
        self.vocabulary.get(term).map(|&c| self.idf[c])
    }

    pub fn len(&self) -> usize {
        self.doc_vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_vectors.is_empty()
    }

    fn vectorize_terms(&self, terms: &[String]) -> SparseVector {
        let mut tf: BTreeMap<usize, f64> = BTreeMap::new();
        for t in terms {
            if let Some(&c) = self.vocabulary.get(t) {
                *tf.entry(c).or_insert(0.0) += 1.0;
            }
        }
        let mut v: SparseVector = tf.into_iter().map(|(c, f)| (c, f * self.idf[c])).collect();
        let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, w) in &mut v {
                *w /= norm;
            }
        }
        v
    }

    /// Stored vector for indexed records, otherwise vectorized against the
    /// index vocabulary (unknown terms ignored).
    pub fn vector(&self, record: &Record) -> SparseVector {
        match self.doc_ids.get(&record.id) {
            Some(&i) => self.doc_vectors[i].clone(),
            None => self.vectorize_terms(&tfidf_terms(&record.text)),
        }
    }

    pub fn similarity(&self, a: &Record, b: &Record) -> f64 {
        cosine(&self.vector(a), &self.vector(b))
    }
}

/// Dot product of two L2-normalized sparse vectors.
pub fn cosine(a: &SparseVector, b: &SparseVector) -> f64 {
    let (mut i, mut j, mut dot) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    dot
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    Most,
    Moderate,
    Least,
    Random,
}

impl FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "most" => Ok(SimilarityMode::Most),
            "moderate" => Ok(SimilarityMode::Moderate),
            "least" => Ok(SimilarityMode::Least),
            "random" => Ok(SimilarityMode::Random),
            _ => Err(Error::InvalidArgument(format!("unknown similarity mode {s:?}"))),
        }
    }
}

impl fmt::Display for SimilarityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityMode::Most => "most",
            SimilarityMode::Moderate => "moderate",
            SimilarityMode::Least => "least",
            SimilarityMode::Random => "random",
        })
    }
}

/// Picks `n` candidates for `target` by TF-IDF cosine similarity.
///
/// Candidates are ranked by similarity, descending, ties by id. `most`
/// takes the head, `least` the tail, `moderate` the window starting at
/// `floor((|C| − n) / 2)`; `random` is a seeded draw in draw order.
pub fn select_dynamic(
    index: &TfidfIndex,
    target: &Record,
    candidates: &[Record],
    n: usize,
    mode: SimilarityMode,
    seed: u64,
) -> Result<Vec<Record>> {
    if let Some(c) = candidates.iter().find(|c| c.id == target.id) {
        return Err(Error::InvalidArgument(format!("candidate {} is the target itself", c.id)));
    }
    if n > candidates.len() {
        return Err(Error::Insufficient {
            what: "prefix candidates",
            needed: n,
            available: candidates.len(),
        });
    }
    if mode == SimilarityMode::Random {
        return Ok(draw_indices(candidates.len(), n, seed)
            .into_iter()
            .map(|i| candidates[i].clone())
            .collect());
    }
    let ranked = rank_by_similarity(index, target, candidates);
    let start = match mode {
        SimilarityMode::Most => 0,
        SimilarityMode::Least => ranked.len() - n,
        SimilarityMode::Moderate => (ranked.len() - n) / 2,
        SimilarityMode::Random => unreachable!(),
    };
    Ok(ranked[start..start + n].iter().map(|(r, _)| (*r).clone()).collect())
}

/// Candidates with their similarity to `target`, best first, ties by id.
pub fn rank_by_similarity<'a>(index: &TfidfIndex, target: &Record, candidates: &'a [Record]) -> Vec<(&'a Record, f64)> {
    let tv = index.vector(target);
    let mut ranked: Vec<(&Record, f64)> = candidates.iter().map(|c| (c, cosine(&tv, &index.vector(c)))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
    ranked
}
