use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use recall_core::attacks::AttackKind;
use recall_core::corpus::{
    balance_eval_with_removed, chunk_records, load_dataset, save_jsonl, split_prefix_pool, DatasetFormat, FieldAliases,
    Label,
};
use recall_core::ngram::{geometric_weights, NgramModel};
use recall_core::pipeline::{self, BackendSpec, PrefixMemberships, PrefixStrategy, RunConfig, RunOutput};
use recall_core::prefixes::SimilarityMode;
use recall_core::remote::{RemoteConfig, DEFAULT_API_KEY_ENV};
use recall_core::scoring::{BoundaryRule, LlMode};

/// Membership-inference evaluation with relative conditional log-likelihood.
///
/// Datasets are JSONL with "text" and "label" fields; labels are
/// "member"/"nonmember" or 1/0 (1 = member). Exit codes: 0 success,
/// 1 evaluation error, 2 usage error or missing input.
#[derive(Parser, Debug)]
#[command(name = "recall", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the embedded byte-level n-gram model.
    TrainLm(TrainArgs),
    /// Build a labeled JSONL corpus by chunking a member and a nonmember text.
    BuildCorpus(BuildCorpusArgs),
    /// Write the held-out prefix pool and the balanced evaluation set.
    Split(SplitArgs),
    /// Run attacks and write report.json, scores.csv and prefix_pool.jsonl.
    Evaluate(EvaluateArgs),
    /// Sweep shot counts 1..=n-max with nested prefixes.
    Sweep(SweepArgs),
    /// Ensemble recall over disjoint shot groups.
    Ensemble(EnsembleArgs),
    /// Token-level likelihood change profiles.
    AnalyzeTokens(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CorpusFormat {
    /// Plain UTF-8 text.
    Text,
    /// JSONL dataset; the text field of every (optionally filtered) record.
    Jsonl,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: CorpusFormat,
    /// Split plain text into training items of at most this many bytes.
    #[arg(long)]
    chunk_bytes: Option<usize>,
    /// Keep only the first this many chunks.
    #[arg(long, requires = "chunk_bytes")]
    max_chunks: Option<usize>,
    /// For JSONL corpora, train only on records with this label.
    #[arg(long, value_parser = parse_label)]
    label: Option<Label>,
    #[command(flatten)]
    fields: FieldArgs,
    #[arg(long, default_value_t = 5)]
    order: usize,
    #[arg(long, default_value_t = 0.1)]
    smoothing: f64,
    /// Interpolation weights, lowest order first; default geometric.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildCorpusArgs {
    #[arg(long)]
    member: PathBuf,
    #[arg(long)]
    nonmember: PathBuf,
    #[arg(long, default_value_t = 256)]
    chunk_bytes: usize,
    #[arg(long)]
    max_chunks: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct FieldArgs {
    #[arg(long, default_value = "text")]
    text_field: String,
    #[arg(long, default_value = "label")]
    label_field: String,
    #[arg(long, default_value = "id")]
    id_field: String,
}

impl FieldArgs {
    fn aliases(&self) -> FieldAliases {
        FieldAliases {
            text: self.text_field.clone(),
            label: self.label_field.clone(),
            id: self.id_field.clone(),
        }
    }
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    fields: FieldArgs,
    #[arg(long, default_value_t = 12)]
    pool_size: usize,
    /// Members removed for balance; defaults to the pool size.
    #[arg(long)]
    balance_members: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to --seed.
    #[arg(long)]
    balance_seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Pool,
    File,
    Dynamic,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Embedded n-gram model file.
    #[arg(long, conflicts_with = "remote_url", required_unless_present = "remote_url")]
    model: Option<PathBuf>,
    /// Do not score the end-of-sequence symbol after the target (n-gram).
    #[arg(long)]
    no_eos: bool,
    #[arg(long)]
    max_context_tokens: Option<usize>,

    /// Base URL of an OpenAI-compatible completions server.
    #[arg(long, requires = "remote_model")]
    remote_url: Option<String>,
    #[arg(long)]
    remote_model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, default_value = DEFAULT_API_KEY_ENV)]
    api_key_env: String,
    #[arg(long, default_value_t = 60_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    #[arg(long, default_value_t = 0)]
    request_pause_ms: u64,
    #[arg(long, default_value_t = 500)]
    backoff_ms: u64,
    #[arg(long, value_enum, default_value = "include")]
    boundary_rule: BoundaryArg,

    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    fields: FieldArgs,

    #[arg(long, value_enum, default_value = "pool")]
    prefix_strategy: StrategyArg,
    /// Text file used verbatim as the prefix (strategy "file").
    #[arg(long)]
    prefix_file: Option<PathBuf>,
    #[arg(long, value_parser = parse_similarity, default_value = "most")]
    similarity: SimilarityMode,
    /// Build the prefix from members held out for balance.
    #[arg(long)]
    member_prefix: bool,
    /// Permit member-built prefixes.
    #[arg(long)]
    allow_member_prefix: bool,

    #[arg(long, default_value_t = 5)]
    shots: usize,
    #[arg(long, default_value_t = 12)]
    pool_size: usize,
    #[arg(long)]
    balance_members: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    balance_seed: Option<u64>,
    /// Shot separator; accepts \n, \t, \r and \\ escapes.
    #[arg(long, default_value = "\\n\\n")]
    separator: String,
    #[arg(long, value_enum, default_value = "mean")]
    ll_mode: LlModeArg,
    /// n-gram model file used by the reference attack.
    #[arg(long)]
    reference_model: Option<PathBuf>,
    /// JSONL of {"id", "neighbors": [...]} used by the neighbor attack.
    #[arg(long)]
    neighbors: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BoundaryArg {
    Include,
    Exclude,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LlModeArg {
    Mean,
    Sum,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', value_parser = parse_attack, default_value = "loss,zlib,mink,minkpp,recall")]
    attacks: Vec<AttackKind>,
    /// k% values for mink and minkpp.
    #[arg(long = "k", value_delimiter = ',', default_value = "20")]
    k_percents: Vec<f64>,
    /// Group count for recall_ensemble.
    #[arg(long)]
    groups: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 12)]
    n_max: usize,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    groups: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MembershipArg {
    Nonmember,
    Member,
    Both,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Prefix memberships to profile; member and both need --allow-member-prefix.
    #[arg(long, value_enum, default_value = "nonmember")]
    prefix_membership: MembershipArg,
}

fn parse_attack(s: &str) -> Result<AttackKind, String> {
    s.parse().map_err(|e: recall_core::Error| e.to_string())
}

fn parse_similarity(s: &str) -> Result<SimilarityMode, String> {
    s.parse().map_err(|e: recall_core::Error| e.to_string())
}

fn parse_label(s: &str) -> Result<Label, String> {
    match s {
        "member" | "1" => Ok(Label::Member),
        "nonmember" | "0" => Ok(Label::Nonmember),
        _ => Err(format!("unknown label {s:?}")),
    }
}

fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => return Err(format!("unknown escape \\{other} in separator")),
            None => return Err("separator ends with a lone backslash".into()),
        }
    }
    Ok(out)
}

/// Usage errors: exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<RunConfig> {
        require_file(&self.dataset, "dataset")?;
        let backend = match (&self.model, &self.remote_url) {
            (Some(model), None) => {
                require_file(model, "model file")?;
                BackendSpec::Ngram {
                    model: model.clone(),
                    score_eos: !self.no_eos,
                    max_context_tokens: self.max_context_tokens,
                }
            }
            (None, Some(url)) => {
                let mut cfg = RemoteConfig::new(url.clone(), self.remote_model.clone().unwrap_or_default());
                cfg.api_key_env = self.api_key_env.clone();
                cfg.timeout = Duration::from_millis(self.timeout_ms);
                cfg.max_retries = self.max_retries;
                cfg.max_in_flight = self.max_in_flight;
                cfg.request_pause = Duration::from_millis(self.request_pause_ms);
                cfg.backoff_base = Duration::from_millis(self.backoff_ms);
                cfg.boundary_rule = match self.boundary_rule {
                    BoundaryArg::Include => BoundaryRule::Include,
                    BoundaryArg::Exclude => BoundaryRule::Exclude,
                };
                cfg.max_context_tokens = self.max_context_tokens;
                cfg.validate().map_err(|e| usage(e.to_string()))?;
                BackendSpec::Remote(cfg)
            }
            _ => return Err(usage("give exactly one of --model or --remote-url")),
        };
        let prefix = match self.prefix_strategy {
            StrategyArg::Pool => PrefixStrategy::Pool,
            StrategyArg::File => {
                let path = self
                    .prefix_file
                    .clone()
                    .ok_or_else(|| usage("--prefix-strategy file needs --prefix-file"))?;
                require_file(&path, "prefix file")?;
                PrefixStrategy::File { path }
            }
            StrategyArg::Dynamic => PrefixStrategy::Dynamic { mode: self.similarity },
        };
        if let Some(p) = &self.reference_model {
            require_file(p, "reference model")?;
        }
        if let Some(p) = &self.neighbors {
            require_file(p, "neighbor file")?;
        }
        if self.member_prefix && !self.allow_member_prefix {
            return Err(usage("--member-prefix needs the explicit --allow-member-prefix override"));
        }
        let mut cfg = RunConfig::new(backend, self.dataset.clone());
        cfg.reference_model = self.reference_model.clone();
        cfg.neighbors = self.neighbors.clone();
        cfg.fields = self.fields.aliases();
        cfg.prefix = prefix;
        cfg.member_prefix = self.member_prefix;
        cfg.allow_member_prefix = self.allow_member_prefix;
        cfg.shots = self.shots;
        cfg.pool_size = self.pool_size;
        cfg.balance_members = self.balance_members;
        cfg.seed = self.seed;
        cfg.balance_seed = self.balance_seed.unwrap_or(self.seed);
        cfg.separator = unescape(&self.separator).map_err(usage)?;
        cfg.ll_mode = match self.ll_mode {
            LlModeArg::Mean => LlMode::Mean,
            LlModeArg::Sum => LlMode::Sum,
        };
        cfg.jobs = self.jobs;
        Ok(cfg)
    }
}

fn check(cfg: &RunConfig) -> anyhow::Result<()> {
    cfg.validate().map_err(|e| usage(e.to_string()))
}

fn finish(out: RunOutput, dir: &Path) -> anyhow::Result<()> {
    out.write(dir)?;
    for a in &out.report.attacks {
        let metric = match (a.auc, a.tpr_at_1pct) {
            (Some(auc), Some(tpr)) => format!("auc {auc:.4}  tpr@1%fpr {tpr:.4}  n {}", a.n_scored),
            _ => a.note.clone().unwrap_or_default(),
        };
        println!("{:<16} {:<12} {metric}", a.attack.as_str(), format!("{:?}", a.status).to_lowercase());
    }
    if let Some(sweep) = &out.report.sweep {
        for row in &sweep.rows {
            let mark = if Some(row.n_shots) == sweep.best_n_shots { " *" } else { "" };
            match row.auc {
                Some(auc) => println!("shots {:>3}  auc {auc:.4}{mark}", row.n_shots),
                None => println!("shots {:>3}  {:?}", row.n_shots, row.status),
            }
        }
    }
    for p in &out.profiles {
        println!(
            "{:<6} records {:>5}  positions {:>5}  head |d| {:.5}  tail |d| {:.5}",
            p.condition.as_str(),
            p.records_used,
            p.positions.len(),
            p.head_magnitude(0.1),
            p.tail_magnitude(0.1)
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn train(args: &TrainArgs) -> anyhow::Result<()> {
    require_file(&args.corpus, "corpus")?;
    let weights = args.weights.clone().unwrap_or_else(|| geometric_weights(args.order));
    let items: Vec<String> = match args.format {
        CorpusFormat::Text => {
            if args.label.is_some() {
                return Err(usage("--label applies to JSONL corpora only"));
            }
            let text = fs::read_to_string(&args.corpus).with_context(|| format!("reading {}", args.corpus.display()))?;
            match args.chunk_bytes {
                Some(n) if n > 0 => chunk_records(&text, n, args.max_chunks, Label::Member, "c")
                    .into_iter()
                    .map(|r| r.text)
                    .collect(),
                Some(_) => return Err(usage("--chunk-bytes must be positive")),
                None => vec![text],
            }
        }
        CorpusFormat::Jsonl => {
            if args.chunk_bytes.is_some() {
                return Err(usage("--chunk-bytes applies to plain-text corpora only"));
            }
            let d = load_dataset(&args.corpus, DatasetFormat::Jsonl, &args.fields.aliases())?;
            d.into_records()
                .into_iter()
                .filter(|r| args.label.is_none_or(|l| r.label == l))
                .map(|r| r.text)
                .collect()
        }
    };
    let model = NgramModel::train(items.iter().map(String::as_str), args.order, args.smoothing, weights)?;
    model.save(&args.out)?;
    println!("trained order-{} model on {} item(s), wrote {}", args.order, items.len(), args.out.display());
    Ok(())
}

fn build_corpus(args: &BuildCorpusArgs) -> anyhow::Result<()> {
    require_file(&args.member, "member text")?;
    require_file(&args.nonmember, "nonmember text")?;
    if args.chunk_bytes == 0 {
        return Err(usage("--chunk-bytes must be positive"));
    }
    let read = |p: &Path| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut records = chunk_records(&read(&args.member)?, args.chunk_bytes, args.max_chunks, Label::Member, &stem(&args.member));
    records.extend(chunk_records(
        &read(&args.nonmember)?,
        args.chunk_bytes,
        args.max_chunks,
        Label::Nonmember,
        &stem(&args.nonmember),
    ));
    save_jsonl(&records, &args.out)?;
    println!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

fn split(args: &SplitArgs) -> anyhow::Result<()> {
    require_file(&args.dataset, "dataset")?;
    let d = load_dataset(&args.dataset, DatasetFormat::Jsonl, &args.fields.aliases())?;
    let (pool, rest) = split_prefix_pool(&d, args.pool_size, args.seed)?;
    let (eval, removed) = balance_eval_with_removed(
        &rest,
        args.balance_members.unwrap_or(args.pool_size),
        args.balance_seed.unwrap_or(args.seed),
    )?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    save_jsonl(pool.shots(), &args.out_dir.join("prefix_pool.jsonl"))?;
    save_jsonl(eval.records(), &args.out_dir.join("eval.jsonl"))?;
    save_jsonl(&removed, &args.out_dir.join("removed_members.jsonl"))?;
    println!("{}", eval.source());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainLm(a) => train(&a),
        Command::BuildCorpus(a) => build_corpus(&a),
        Command::Split(a) => split(&a),
        Command::Evaluate(a) => {
            let mut cfg = a.run.config()?;
            cfg.attacks = a.attacks.clone();
            cfg.k_percents = a.k_percents.clone();
            cfg.groups = a.groups;
            check(&cfg)?;
            finish(pipeline::evaluate(&cfg)?, &a.run.out_dir)
        }
        Command::Sweep(a) => {
            let mut cfg = a.run.config()?;
            cfg.attacks = vec![AttackKind::Recall];
            check(&cfg)?;
            if a.n_max == 0 {
                return Err(usage("--n-max must be at least 1"));
            }
            finish(pipeline::sweep(&cfg, a.n_max)?, &a.run.out_dir)
        }
        Command::Ensemble(a) => {
            let mut cfg = a.run.config()?;
            cfg.attacks = vec![AttackKind::Recall, AttackKind::RecallEnsemble];
            cfg.groups = Some(a.groups);
            check(&cfg)?;
            finish(pipeline::evaluate(&cfg)?, &a.run.out_dir)
        }
        Command::AnalyzeTokens(a) => {
            let cfg = a.run.config()?;
            check(&cfg)?;
            let which = match a.prefix_membership {
                MembershipArg::Nonmember => PrefixMemberships::Nonmember,
                MembershipArg::Member => PrefixMemberships::Member,
                MembershipArg::Both => PrefixMemberships::Both,
            };
            if which != PrefixMemberships::Nonmember && !cfg.allow_member_prefix {
                return Err(usage("member prefixes need the explicit --allow-member-prefix override"));
            }
            finish(pipeline::analyze_tokens(&cfg, which)?, &a.run.out_dir)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separator_escapes() {
        assert_eq!(unescape("\\n\\n").unwrap(), "\n\n");
        assert_eq!(unescape("").unwrap(), "");
        assert_eq!(unescape("a\\tb\\\\").unwrap(), "a\tb\\");
        assert!(unescape("\\q").is_err());
        assert!(unescape("x\\").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
