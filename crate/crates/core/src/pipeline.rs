//! End-to-end runs: load, hold out the prefix pool, balance, score, attack
//! and report.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{ll_shift_summary, plot_data_json, token_delta_profile, write_profiles_csv, LlShiftSummary, TokenDeltaProfile};
use crate::attacks::{
    ensemble_recall, loss_score, minkpp_score, mink_score, neighbor_score, recall_score, reference_score, zlib_score,
    AttackKind, AttackParams, DEFLATE_LEVEL, MINKPP_SIGMA_EPS,
};
use crate::corpus::{
    balance_eval_with_removed, load_dataset, split_prefix_pool, write_jsonl, Dataset, DatasetFormat, FieldAliases, Label,
    PrefixPool, Record,
};
use crate::error::{Error, Result};
use crate::metrics::{auc, shot_sweep_report, tpr_at_fpr, LabeledScore, ShotOutcome, SweepTable};
use crate::ngram::{NgramBackend, NgramModel};
use crate::prefixes::{
    build_prefix, build_prefix_allowing_members, build_tfidf, group_shots, select_dynamic, Prefix, SimilarityMode,
    TfidfIndex, DEFAULT_SEPARATOR,
};
use crate::remote::{RemoteBackend, RemoteConfig};
use crate::scoring::{sequence_ll, LlMode, ScoringBackend};

pub const REPORT_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const POOL_FILE: &str = "prefix_pool.jsonl";
pub const PROFILES_CSV: &str = "token_profiles.csv";
pub const PROFILES_JSON: &str = "token_profiles.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Ngram {
        model: PathBuf,
        score_eos: bool,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        max_context_tokens: Option<usize>,
    },
    Remote(RemoteConfig),
}

impl BackendSpec {
    pub fn ngram(model: impl Into<PathBuf>) -> Self {
        BackendSpec::Ngram {
            model: model.into(),
            score_eos: true,
            max_context_tokens: None,
        }
    }

    pub fn open(&self) -> Result<Box<dyn ScoringBackend>> {
        match self {
            BackendSpec::Ngram {
                model,
                score_eos,
                max_context_tokens,
            } => Ok(Box::new(
                NgramBackend::new(NgramModel::load(model)?)
                    .score_eos(*score_eos)
                    .max_context_tokens(*max_context_tokens),
            )),
            BackendSpec::Remote(cfg) => Ok(Box::new(RemoteBackend::new(cfg.clone())?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrefixStrategy {
    /// First `shots` records of the held-out pool.
    Pool,
    /// Whole file content used verbatim as the prefix.
    File { path: PathBuf },
    /// Per-target TF-IDF selection from the pool.
    Dynamic { mode: SimilarityMode },
}

/// Everything that affects scores. Serialized verbatim into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub backend: BackendSpec,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reference_model: Option<PathBuf>,
    /// JSONL of `{"id": <record id>, "neighbors": [text, ...]}`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub neighbors: Option<PathBuf>,
    pub dataset: PathBuf,
    pub fields: FieldAliases,
    pub prefix: PrefixStrategy,
    /// Build prefixes from held-out members instead of the nonmember pool.
    pub member_prefix: bool,
    pub allow_member_prefix: bool,
    pub shots: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub groups: Option<usize>,
    pub pool_size: usize,
    /// Members removed for balance; defaults to `pool_size`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub balance_members: Option<usize>,
    pub attacks: Vec<AttackKind>,
    pub k_percents: Vec<f64>,
    pub separator: String,
    pub ll_mode: LlMode,
    pub seed: u64,
    pub balance_seed: u64,
    /// Worker threads; not score-affecting, so not serialized.
    #[serde(skip)]
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn new(backend: BackendSpec, dataset: impl Into<PathBuf>) -> Self {
        RunConfig {
            backend,
            reference_model: None,
            neighbors: None,
            dataset: dataset.into(),
            fields: FieldAliases::default(),
            prefix: PrefixStrategy::Pool,
            member_prefix: false,
            allow_member_prefix: false,
            shots: 5,
            groups: None,
            pool_size: 12,
            balance_members: None,
            attacks: vec![AttackKind::Loss, AttackKind::Recall],
            k_percents: vec![20.0],
            separator: DEFAULT_SEPARATOR.into(),
            ll_mode: LlMode::Mean,
            seed: 0,
            balance_seed: 0,
            jobs: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.member_prefix && !self.allow_member_prefix {
            return Err(Error::InvalidArgument(
                "member-built prefixes need the explicit --allow-member-prefix override".into(),
            ));
        }
        if self.shots == 0 && !matches!(self.prefix, PrefixStrategy::File { .. }) {
            return Err(Error::InvalidArgument("shots must be at least 1".into()));
        }
        if self.attacks.is_empty() {
            return Err(Error::InvalidArgument("no attacks requested".into()));
        }
        if self.attacks.iter().any(|a| matches!(a, AttackKind::Mink | AttackKind::Minkpp)) && self.k_percents.is_empty() {
            return Err(Error::InvalidArgument("min-k attacks need at least one k".into()));
        }
        if let Some(k) = self.k_percents.iter().find(|k| !(**k > 0.0 && **k <= 100.0)) {
            return Err(Error::InvalidArgument(format!("k% must be in (0, 100], got {k}")));
        }
        if self.attacks.contains(&AttackKind::RecallEnsemble) {
            let g = self
                .groups
                .ok_or_else(|| Error::InvalidArgument("recall_ensemble needs a group count".into()))?;
            if g == 0 || g > self.shots {
                return Err(Error::InvalidArgument(format!("cannot split {} shots into {g} groups", self.shots)));
            }
            if matches!(self.prefix, PrefixStrategy::File { .. }) {
                return Err(Error::InvalidArgument("recall_ensemble cannot split a verbatim prefix file".into()));
            }
        }
        Ok(())
    }

    fn members_to_remove(&self) -> usize {
        self.balance_members.unwrap_or(self.pool_size)
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.unwrap_or(0))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub source: String,
    pub loaded_records: usize,
    pub loaded_members: usize,
    pub loaded_nonmembers: usize,
    pub pool_size: usize,
    pub removed_members: usize,
    pub eval_members: usize,
    pub eval_nonmembers: usize,
}

/// The evaluation split: held-out pool, balanced evaluation set and the
/// members removed for balance (the member-prefix source).
#[derive(Debug, Clone)]
pub struct Split {
    pub pool: PrefixPool,
    pub eval: Dataset,
    pub removed_members: Vec<Record>,
    pub stats: DatasetStats,
}

pub fn prepare_split(d: &Dataset, cfg: &RunConfig) -> Result<Split> {
    let (pool, rest) = split_prefix_pool(d, cfg.pool_size, cfg.seed)?;
    let (eval, removed_members) = balance_eval_with_removed(&rest, cfg.members_to_remove(), cfg.balance_seed)?;
    eval.require_both_classes()?;
    let stats = DatasetStats {
        source: eval.source().to_string(),
        loaded_records: d.len(),
        loaded_members: d.count(Label::Member),
        loaded_nonmembers: d.count(Label::Nonmember),
        pool_size: pool.len(),
        removed_members: removed_members.len(),
        eval_members: eval.count(Label::Member),
        eval_nonmembers: eval.count(Label::Nonmember),
    };
    Ok(Split {
        pool,
        eval,
        removed_members,
        stats,
    })
}

impl Split {
    /// Candidate shots in order: the nonmember pool, or the removed members
    /// for member-built prefixes.
    pub fn shot_source(&self, member: bool) -> &[Record] {
        if member {
            &self.removed_members
        } else {
            self.pool.shots()
        }
    }
}

fn take_shots(source: &[Record], n: usize, what: &'static str) -> Result<Vec<Record>> {
    if n > source.len() {
        return Err(Error::Insufficient {
            what,
            needed: n,
            available: source.len(),
        });
    }
    Ok(source[..n].to_vec())
}

fn assemble(shots: Vec<Record>, separator: &str, member: bool) -> Result<Prefix> {
    if member {
        build_prefix_allowing_members(shots, separator)
    } else {
        build_prefix(shots, separator)
    }
}

fn fixed_shots(split: &Split, cfg: &RunConfig, n: usize) -> Result<Vec<Record>> {
    let what = if cfg.member_prefix { "held-out members for the prefix" } else { "pool shots for the prefix" };
    take_shots(split.shot_source(cfg.member_prefix), n, what)
}

/// How each record gets its prefix.
enum PrefixPlan {
    Fixed(Prefix),
    Dynamic {
        index: TfidfIndex,
        candidates: Vec<Record>,
        mode: SimilarityMode,
    },
}

impl PrefixPlan {
    fn build(split: &Split, cfg: &RunConfig) -> Result<Self> {
        match &cfg.prefix {
            PrefixStrategy::Pool => Ok(PrefixPlan::Fixed(assemble(
                fixed_shots(split, cfg, cfg.shots)?,
                &cfg.separator,
                cfg.member_prefix,
            )?)),
            PrefixStrategy::File { path } => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Ok(PrefixPlan::Fixed(Prefix::verbatim(path.display().to_string(), text)?))
            }
            PrefixStrategy::Dynamic { mode } => {
                let candidates = split.shot_source(cfg.member_prefix).to_vec();
                let mut all = candidates.clone();
                all.extend(split.eval.records().iter().cloned());
                Ok(PrefixPlan::Dynamic {
                    index: build_tfidf(&all)?,
                    candidates,
                    mode: *mode,
                })
            }
        }
    }

    fn shots_for(&self, target: &Record, cfg: &RunConfig) -> Result<Vec<Record>> {
        match self {
            PrefixPlan::Fixed(p) => Ok(p.shots().to_vec()),
            PrefixPlan::Dynamic { index, candidates, mode } => {
                select_dynamic(index, target, candidates, cfg.shots, *mode, cfg.seed)
            }
        }
    }

    fn prefix_for(&self, target: &Record, cfg: &RunConfig) -> Result<Prefix> {
        match self {
            PrefixPlan::Fixed(p) => Ok(p.clone()),
            PrefixPlan::Dynamic { .. } => assemble(self.shots_for(target, cfg)?, &cfg.separator, cfg.member_prefix),
        }
    }

    fn describe(&self, cfg: &RunConfig) -> Value {
        match self {
            PrefixPlan::Fixed(p) => json!({
                "strategy": cfg.prefix,
                "membership": p.membership(),
                "n_shots": p.shots().len(),
                "shot_ids": p.shot_ids(),
                "text_bytes": p.text().len(),
                "separator": p.separator(),
            }),
            PrefixPlan::Dynamic { candidates, mode, .. } => json!({
                "strategy": cfg.prefix,
                "membership": if cfg.member_prefix { Label::Member } else { Label::Nonmember },
                "n_shots": cfg.shots,
                "candidate_ids": candidates.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
                "mode": mode,
                "separator": cfg.separator,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackStatus {
    Ok,
    Unsupported,
    Skipped,
    Overflow,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackEntry {
    pub attack: AttackKind,
    pub params: AttackParams,
    pub status: AttackStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tpr_at_1pct: Option<f64>,
    pub n_scored: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub command: String,
    pub config: RunConfig,
    pub backend: Value,
    pub decisions: Value,
    pub dataset_stats: DatasetStats,
    pub prefix: Value,
    pub attacks: Vec<AttackEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analysis: Option<Value>,
    pub notes: Vec<String>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn attack(&self, kind: AttackKind) -> Option<&AttackEntry> {
        self.attacks.iter().find(|a| a.attack == kind)
    }
}

/// One attack column of the score table.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub attack: AttackKind,
    pub params: AttackParams,
}

impl Column {
    pub fn name(&self) -> String {
        let mut s = self.attack.as_str().to_string();
        if let Some(k) = self.params.k_percent {
            s.push_str(&format!("_k{k}"));
        }
        if let Some(n) = self.params.shots {
            s.push_str(&format!("_n{n}"));
        }
        if let Some(g) = self.params.groups {
            s.push_str(&format!("_g{g}"));
        }
        s
    }
}

/// Per-record raw scores; `None` where a record was excluded or the
/// attack did not run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub columns: Vec<Column>,
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub raw: Vec<Vec<Option<f64>>>,
}

impl ScoreTable {
    pub fn canonical(&self, col: usize) -> Vec<LabeledScore> {
        let sign = self.columns[col].attack.orientation();
        self.raw
            .iter()
            .zip(&self.labels)
            .filter_map(|(row, l)| row[col].map(|r| (sign * r, *l)))
            .collect()
    }

    pub fn column(&self, kind: AttackKind) -> Option<usize> {
        self.columns.iter().position(|c| c.attack == kind)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "label".to_string()];
        for c in &self.columns {
            header.push(format!("{}_raw", c.name()));
            header.push(format!("{}_canonical", c.name()));
        }
        w.write_record(&header)?;
        for ((id, label), row) in self.ids.iter().zip(&self.labels).zip(&self.raw) {
            let mut fields = vec![id.clone(), label.as_str().to_string()];
            for (c, v) in self.columns.iter().zip(row) {
                match v {
                    Some(r) => {
                        fields.push(r.to_string());
                        fields.push((c.attack.orientation() * r).to_string());
                    }
                    None => fields.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&fields)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Report plus the side files of one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub scores: Option<ScoreTable>,
    pub pool: Vec<Record>,
    pub profiles: Vec<TokenDeltaProfile>,
    pub shifts: Vec<LlShiftSummary>,
}

impl RunOutput {
    /// Writes `report.json` and the side files into `dir`, creating it.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))
        };
        write(REPORT_FILE, self.report.to_json()?.as_bytes())?;
        let mut pool = Vec::new();
        write_jsonl(&self.pool, &mut pool)?;
        write(POOL_FILE, &pool)?;
        if let Some(scores) = &self.scores {
            let mut buf = Vec::new();
            scores.write_csv(&mut buf)?;
            write(SCORES_FILE, &buf)?;
        }
        if !self.profiles.is_empty() {
            let mut buf = Vec::new();
            write_profiles_csv(&self.profiles, &mut buf)?;
            write(PROFILES_CSV, &buf)?;
            write(PROFILES_JSON, plot_data_json(&self.profiles, &self.shifts)?.as_bytes())?;
        }
        Ok(())
    }
}

fn decisions(cfg: &RunConfig) -> Value {
    let orientation: serde_json::Map<String, Value> = AttackKind::ALL
        .iter()
        .map(|a| (a.as_str().to_string(), json!(if a.orientation() < 0.0 { "-raw" } else { "raw" })))
        .collect();
    json!({
        "separator": cfg.separator,
        "ll_mode": cfg.ll_mode,
        "deflate_level": DEFLATE_LEVEL,
        "deflate_container": "zlib (RFC 1950)",
        "minkpp_sigma_eps": MINKPP_SIGMA_EPS,
        "mink_cut": "max(1, floor(k/100 * n)), ties to the earlier position",
        "pool_seed": cfg.seed,
        "balance_seed": cfg.balance_seed,
        "members_removed_for_balance": cfg.members_to_remove(),
        "rng": "ChaCha8 seeded from u64, sampling without replacement in draw order",
        "tfidf": "lowercased alphanumeric runs, raw tf, idf = ln((1+N)/(1+df)) + 1, L2 norm",
        "canonical_orientation": orientation,
        "auc": "Mann-Whitney with midranks, members positive",
        "tpr_at_fpr": "highest TPR with FPR <= 1%, no interpolation",
    })
}

fn load_neighbors(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    #[derive(Deserialize)]
    struct Line {
        id: String,
        neighbors: Vec<String>,
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(l.id, l.neighbors);
    }
    Ok(out)
}

enum Cell {
    Score(f64),
    /// Record excluded from this attack, with the reason.
    Excluded(String),
    Overflow(String),
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    backend: &'a dyn ScoringBackend,
    reference: Option<&'a dyn ScoringBackend>,
    neighbors: Option<&'a HashMap<String, Vec<String>>>,
    plan: &'a PrefixPlan,
    want_moments: bool,
}

fn cell(r: Result<f64>) -> Result<Cell> {
    match r {
        Ok(v) => Ok(Cell::Score(v)),
        Err(Error::DegenerateLL(ll)) => Ok(Cell::Excluded(format!("degenerate unconditional LL {ll}"))),
        Err(e @ Error::ContextOverflow { .. }) => Ok(Cell::Overflow(e.to_string())),
        Err(e) => Err(e),
    }
}

struct RecordRun {
    cells: Vec<Cell>,
    dropped_tokens: usize,
    straddling_tokens: usize,
}

fn score_record(ctx: &Ctx, columns: &[Column], x: &Record) -> Result<RecordRun> {
    let uncond = if ctx.want_moments {
        ctx.backend.score_target_with_moments("", &x.text)?
    } else {
        ctx.backend.score_target("", &x.text)?
    };
    let mut dropped = uncond.dropped_tokens();
    let mut straddling = 0;
    let uncond_ll = sequence_ll(&uncond)?.value(ctx.cfg.ll_mode);
    let mut cells = Vec::with_capacity(columns.len());
    for col in columns {
        let c = match col.attack {
            AttackKind::Loss => cell(loss_score(&uncond))?,
            AttackKind::Zlib => cell(zlib_score(&uncond, x.text.as_bytes()))?,
            AttackKind::Mink => cell(mink_score(&uncond, col.params.k_percent.expect("k set for mink")))?,
            AttackKind::Minkpp => cell(minkpp_score(
                &uncond,
                col.params.k_percent.expect("k set for minkpp"),
                &ctx.backend.name(),
            ))?,
            AttackKind::Reference => {
                let reference = ctx.reference.expect("reference attack runs only with a reference backend");
                let ts_ref = reference.score_target("", &x.text)?;
                cell(reference_score(&x.id, &uncond, &x.id, &ts_ref))?
            }
            AttackKind::Neighbor => {
                match ctx.neighbors.and_then(|n| n.get(&x.id)).filter(|n| !n.is_empty()) {
                    None => Cell::Excluded("no neighbors".into()),
                    Some(texts) => {
                        let ts = texts
                            .iter()
                            .map(|t| ctx.backend.score_target("", t))
                            .collect::<Result<Vec<_>>>()?;
                        cell(neighbor_score(&uncond, &ts))?
                    }
                }
            }
            AttackKind::Recall => {
                let prefix = ctx.plan.prefix_for(x, ctx.cfg)?;
                match ctx.backend.score_target(prefix.text(), &x.text) {
                    Ok(ts) => {
                        dropped += ts.dropped_tokens();
                        straddling += ts.straddling_tokens();
                        let ll = sequence_ll(&ts)?.value(ctx.cfg.ll_mode);
                        cell(recall_score(ll, uncond_ll))?
                    }
                    Err(e) => cell(Err(e))?,
                }
            }
            AttackKind::RecallEnsemble => {
                let shots = ctx.plan.shots_for(x, ctx.cfg)?;
                let groups = group_shots(&shots, col.params.groups.expect("groups set for ensemble"))?
                    .into_iter()
                    .map(|g| assemble(g, &ctx.cfg.separator, ctx.cfg.member_prefix))
                    .collect::<Result<Vec<_>>>()?;
                cell(ensemble_recall(ctx.backend, x, &groups, ctx.cfg.ll_mode).map(|s| s.raw))?
            }
        };
        cells.push(c);
    }
    Ok(RecordRun {
        cells,
        dropped_tokens: dropped,
        straddling_tokens: straddling,
    })
}

fn columns(cfg: &RunConfig) -> Vec<Column> {
    let mut attacks = cfg.attacks.clone();
    attacks.sort();
    attacks.dedup();
    let shots = match cfg.prefix {
        PrefixStrategy::File { .. } => None,
        _ => Some(cfg.shots),
    };
    let mut out = Vec::new();
    for a in attacks {
        match a {
            AttackKind::Mink | AttackKind::Minkpp => {
                for &k in &cfg.k_percents {
                    out.push(Column {
                        attack: a,
                        params: AttackParams::k(k),
                    });
                }
            }
            AttackKind::Recall => out.push(Column {
                attack: a,
                params: AttackParams {
                    shots,
                    ..Default::default()
                },
            }),
            AttackKind::RecallEnsemble => out.push(Column {
                attack: a,
                params: AttackParams {
                    shots,
                    groups: cfg.groups,
                    ..Default::default()
                },
            }),
            _ => out.push(Column {
                attack: a,
                params: AttackParams::default(),
            }),
        }
    }
    out
}

fn entry(col: &Column, status: AttackStatus, note: Option<String>) -> AttackEntry {
    AttackEntry {
        attack: col.attack,
        params: col.params.clone(),
        status,
        auc: None,
        tpr_at_1pct: None,
        n_scored: 0,
        note,
    }
}

fn load(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    load_dataset(&cfg.dataset, DatasetFormat::Jsonl, &cfg.fields)
}

/// Full evaluation: every requested attack on the balanced evaluation set.
pub fn evaluate(cfg: &RunConfig) -> Result<RunOutput> {
    let dataset = load(cfg)?;
    let backend = cfg.backend.open()?;
    evaluate_with(cfg, &dataset, backend.as_ref())
}

/// [`evaluate`] over an already loaded dataset and backend.
pub fn evaluate_with(cfg: &RunConfig, dataset: &Dataset, backend: &dyn ScoringBackend) -> Result<RunOutput> {
    cfg.validate()?;
    let split = prepare_split(dataset, cfg)?;
    let plan = PrefixPlan::build(&split, cfg)?;
    let caps = backend.capabilities();
    let reference = match &cfg.reference_model {
        Some(p) if cfg.attacks.contains(&AttackKind::Reference) => Some(NgramBackend::new(NgramModel::load(p)?)),
        _ => None,
    };
    let neighbors = match &cfg.neighbors {
        Some(p) if cfg.attacks.contains(&AttackKind::Neighbor) => Some(load_neighbors(p)?),
        _ => None,
    };

    let all_columns = columns(cfg);
    let mut entries: Vec<Option<AttackEntry>> = Vec::with_capacity(all_columns.len());
    let mut active = Vec::new();
    for col in &all_columns {
        let pre = match col.attack {
            AttackKind::Minkpp if !caps.full_vocab_moments => Some(entry(
                col,
                AttackStatus::Unsupported,
                Some(format!("backend {} does not expose full-vocabulary moments", backend.name())),
            )),
            AttackKind::Reference if reference.is_none() => Some(entry(
                col,
                AttackStatus::Skipped,
                Some("no reference model configured".into()),
            )),
            AttackKind::Neighbor if neighbors.is_none() => Some(entry(
                col,
                AttackStatus::Skipped,
                Some("no neighbor file configured".into()),
            )),
            _ => None,
        };
        if pre.is_none() {
            active.push(col.clone());
        }
        entries.push(pre);
    }
    let ctx = Ctx {
        cfg,
        backend,
        reference: reference.as_ref().map(|r| r as &dyn ScoringBackend),
        neighbors: neighbors.as_ref(),
        plan: &plan,
        want_moments: active.iter().any(|c| c.attack == AttackKind::Minkpp),
    };
    let records = split.eval.records();
    let runs = cfg
        .thread_pool()?
        .install(|| records.par_iter().map(|x| score_record(&ctx, &active, x)).collect::<Result<Vec<_>>>())?;

    let mut notes = Vec::new();
    let dropped: usize = runs.iter().map(|r| r.dropped_tokens).sum();
    if dropped > 0 {
        notes.push(format!("{dropped} target token(s) with null logprobs were dropped before scoring"));
    }
    let straddling: usize = runs.iter().map(|r| r.straddling_tokens).sum();
    if straddling > 0 {
        notes.push(format!("{straddling} token(s) straddled the prefix/target boundary"));
    }

    let mut table = ScoreTable {
        columns: Vec::new(),
        ids: records.iter().map(|r| r.id.clone()).collect(),
        labels: records.iter().map(|r| r.label).collect(),
        raw: vec![Vec::new(); records.len()],
    };
    let mut active_iter = 0;
    for (col, pre) in all_columns.iter().zip(entries.iter_mut()) {
        if pre.is_some() {
            continue;
        }
        let j = active_iter;
        active_iter += 1;
        let overflow = runs.iter().find_map(|r| match &r.cells[j] {
            Cell::Overflow(m) => Some(m.clone()),
            _ => None,
        });
        if let Some(m) = overflow {
            *pre = Some(entry(col, AttackStatus::Overflow, Some(m)));
            continue;
        }
        let excluded = runs.iter().filter(|r| matches!(r.cells[j], Cell::Excluded(_))).count();
        table.columns.push(col.clone());
        for (row, run) in table.raw.iter_mut().zip(&runs) {
            row.push(match run.cells[j] {
                Cell::Score(v) => Some(v),
                _ => None,
            });
        }
        let scores = table.canonical(table.columns.len() - 1);
        let mut e = entry(col, AttackStatus::Ok, None);
        e.n_scored = scores.len();
        if excluded > 0 {
            let reason = runs.iter().find_map(|r| match &r.cells[j] {
                Cell::Excluded(m) => Some(m.clone()),
                _ => None,
            });
            e.note = Some(format!("{excluded} record(s) excluded: {}", reason.unwrap_or_default()));
        }
        match (auc(&scores), tpr_at_fpr(&scores, 0.01)) {
            (Ok(a), Ok(t)) => {
                e.auc = Some(a);
                e.tpr_at_1pct = Some(t);
            }
            (Err(err), _) | (_, Err(err)) => {
                e.status = AttackStatus::Error;
                e.note = Some(err.to_string());
            }
        }
        *pre = Some(e);
    }

    let report = Report {
        version: REPORT_VERSION,
        command: "evaluate".into(),
        config: cfg.clone(),
        backend: backend.settings(),
        decisions: decisions(cfg),
        dataset_stats: split.stats.clone(),
        prefix: plan.describe(cfg),
        attacks: entries.into_iter().map(|e| e.expect("every column has an entry")).collect(),
        sweep: None,
        analysis: None,
        notes,
    };
    Ok(RunOutput {
        report,
        scores: Some(table),
        pool: split.pool.shots().to_vec(),
        profiles: Vec::new(),
        shifts: Vec::new(),
    })
}

/// Recall at every shot count `1..=n_max` with nested prefixes.
pub fn sweep(cfg: &RunConfig, n_max: usize) -> Result<RunOutput> {
    let dataset = load(cfg)?;
    let backend = cfg.backend.open()?;
    sweep_with(cfg, &dataset, backend.as_ref(), n_max)
}

pub fn sweep_with(cfg: &RunConfig, dataset: &Dataset, backend: &dyn ScoringBackend, n_max: usize) -> Result<RunOutput> {
    cfg.validate()?;
    if n_max == 0 {
        return Err(Error::InvalidArgument("sweep needs n_max >= 1".into()));
    }
    if !matches!(cfg.prefix, PrefixStrategy::Pool) {
        return Err(Error::InvalidArgument("the shot sweep uses the fixed pool strategy".into()));
    }
    let split = prepare_split(dataset, cfg)?;
    let shots = fixed_shots(&split, cfg, n_max)?;
    let prefixes = (1..=n_max)
        .map(|n| assemble(shots[..n].to_vec(), &cfg.separator, cfg.member_prefix))
        .collect::<Result<Vec<_>>>()?;
    let records = split.eval.records();
    let pool = cfg.thread_pool()?;
    let uncond: Vec<f64> = pool.install(|| {
        records
            .par_iter()
            .map(|x| Ok(sequence_ll(&backend.score_target("", &x.text)?)?.value(cfg.ll_mode)))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut outcomes = Vec::with_capacity(n_max);
    let mut excluded_notes = Vec::new();
    for (i, prefix) in prefixes.iter().enumerate() {
        let n = i + 1;
        let cells: Vec<Cell> = pool.install(|| {
            records
                .par_iter()
                .zip(&uncond)
                .map(|(x, &u)| {
                    cell(
                        backend
                            .score_target(prefix.text(), &x.text)
                            .and_then(|ts| recall_score(sequence_ll(&ts)?.value(cfg.ll_mode), u)),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;
        if cells.iter().any(|c| matches!(c, Cell::Overflow(_))) {
            outcomes.push((n, ShotOutcome::Overflow));
            continue;
        }
        let scores: Vec<LabeledScore> = cells
            .iter()
            .zip(records)
            .filter_map(|(c, r)| match c {
                Cell::Score(v) => Some((*v, r.label)),
                _ => None,
            })
            .collect();
        let excluded = records.len() - scores.len();
        if excluded > 0 {
            excluded_notes.push(format!("{n} shots: {excluded} record(s) excluded for degenerate LL"));
        }
        if scores.iter().any(|s| s.1.is_member()) && scores.iter().any(|s| !s.1.is_member()) {
            outcomes.push((n, ShotOutcome::Scored(scores)));
        } else {
            outcomes.push((n, ShotOutcome::Failed("scored records lack one class".into())));
        }
    }
    let table = shot_sweep_report(outcomes)?;
    let best = table.best_n_shots.and_then(|n| table.rows.iter().find(|r| r.n_shots == n));
    let recall_entry = AttackEntry {
        attack: AttackKind::Recall,
        params: AttackParams {
            shots: table.best_n_shots,
            ..Default::default()
        },
        status: if best.is_some() { AttackStatus::Ok } else { AttackStatus::Overflow },
        auc: best.and_then(|r| r.auc),
        tpr_at_1pct: best.and_then(|r| r.tpr_at_1pct),
        n_scored: if best.is_some() { records.len() } else { 0 },
        note: Some("best shot count of the sweep".into()),
    };
    let mut prefix = json!({
        "strategy": cfg.prefix,
        "membership": if cfg.member_prefix { Label::Member } else { Label::Nonmember },
        "shot_ids": shots.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
        "nested": true,
        "separator": cfg.separator,
    });
    prefix["n_max"] = json!(n_max);
    let report = Report {
        version: REPORT_VERSION,
        command: "sweep".into(),
        config: cfg.clone(),
        backend: backend.settings(),
        decisions: decisions(cfg),
        dataset_stats: split.stats.clone(),
        prefix,
        attacks: vec![recall_entry],
        sweep: Some(table),
        analysis: None,
        notes: excluded_notes,
    };
    Ok(RunOutput {
        report,
        scores: None,
        pool: split.pool.shots().to_vec(),
        profiles: Vec::new(),
        shifts: Vec::new(),
    })
}

/// Which prefix memberships token analysis runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixMemberships {
    Nonmember,
    Member,
    Both,
}

/// Token-level delta profiles for both groups under the selected prefix
/// memberships, plus per-group LL shift summaries.
pub fn analyze_tokens(cfg: &RunConfig, which: PrefixMemberships) -> Result<RunOutput> {
    let dataset = load(cfg)?;
    let backend = cfg.backend.open()?;
    analyze_tokens_with(cfg, &dataset, backend.as_ref(), which)
}

pub fn analyze_tokens_with(
    cfg: &RunConfig,
    dataset: &Dataset,
    backend: &dyn ScoringBackend,
    which: PrefixMemberships,
) -> Result<RunOutput> {
    cfg.validate()?;
    if which != PrefixMemberships::Nonmember && !cfg.allow_member_prefix {
        return Err(Error::InvalidArgument(
            "member-built prefixes need the explicit --allow-member-prefix override".into(),
        ));
    }
    if !matches!(cfg.prefix, PrefixStrategy::Pool) {
        return Err(Error::InvalidArgument("token analysis uses the fixed pool strategy".into()));
    }
    let split = prepare_split(dataset, cfg)?;
    let memberships: &[bool] = match which {
        PrefixMemberships::Nonmember => &[false],
        PrefixMemberships::Member => &[true],
        PrefixMemberships::Both => &[false, true],
    };
    let pool = cfg.thread_pool()?;
    let mut profiles = Vec::new();
    let mut shifts = Vec::new();
    let mut prefixes = Vec::new();
    for &member in memberships {
        let what = if member { "held-out members for the prefix" } else { "pool shots for the prefix" };
        let prefix = assemble(take_shots(split.shot_source(member), cfg.shots, what)?, &cfg.separator, member)?;
        for group in [Label::Member, Label::Nonmember] {
            profiles.push(pool.install(|| token_delta_profile(backend, &split.eval, &prefix, group))?);
        }
        shifts.push(pool.install(|| ll_shift_summary(backend, &split.eval, &prefix))?);
        prefixes.push(json!({
            "membership": prefix.membership(),
            "shot_ids": prefix.shot_ids(),
            "text_bytes": prefix.text().len(),
        }));
    }
    let summary: Vec<Value> = profiles
        .iter()
        .map(|p| {
            json!({
                "condition": p.condition,
                "positions": p.positions.len(),
                "records_used": p.records_used,
                "records_skipped": p.records_skipped,
                "head_10pct_abs_mean_delta": p.head_magnitude(0.1),
                "tail_10pct_abs_mean_delta": p.tail_magnitude(0.1),
            })
        })
        .collect();
    let groups: Vec<Value> = shifts
        .iter()
        .map(|s| json!({ "prefix_membership": s.prefix_membership, "groups": s.groups }))
        .collect();
    let skipped: usize = profiles.iter().map(|p| p.records_skipped).sum();
    let mut notes = vec!["deltas are raw per-token logprob differences; end-of-sequence excluded".to_string()];
    if skipped > 0 {
        notes.push(format!("{skipped} record(s) skipped for tokenization mismatch"));
    }
    let report = Report {
        version: REPORT_VERSION,
        command: "analyze-tokens".into(),
        config: cfg.clone(),
        backend: backend.settings(),
        decisions: decisions(cfg),
        dataset_stats: split.stats.clone(),
        prefix: Value::Array(prefixes),
        attacks: Vec::new(),
        sweep: None,
        analysis: Some(json!({ "profiles": summary, "ll_shift": groups })),
        notes,
    };
    Ok(RunOutput {
        report,
        scores: None,
        pool: split.pool.shots().to_vec(),
        profiles,
        shifts,
    })
}
