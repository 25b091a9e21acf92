use proptest::prelude::*;
use recall_core::analysis::mean_by_position;
use recall_core::attacks::{loss_score, mink_score, recall_score};
use recall_core::corpus::{parse_jsonl, split_prefix_pool, write_jsonl, Dataset, FieldAliases, Label, Record};
use recall_core::metrics::{auc, roc_curve, tpr_at_fpr, LabeledScore};
use recall_core::ngram::{geometric_weights, NgramBackend, NgramModel, Symbol};
use recall_core::prefixes::{build_prefix, build_tfidf, group_shots, rank_by_similarity, select_dynamic, SimilarityMode};
use recall_core::scoring::{sequence_ll, ScoringBackend, TokenScores};

fn label(member: bool) -> Label {
    if member {
        Label::Member
    } else {
        Label::Nonmember
    }
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(("[a-z \u{e9}\u{4e2d}\"\\\\\n]{1,20}", any::<bool>()), 2..40).prop_map(|rows| {
        let mut records: Vec<Record> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (text, m))| Record::new(format!("r{i}"), text, label(m)))
            .collect();
        records[0].label = Label::Member;
        records[1].label = Label::Nonmember;
        Dataset::new(records, "prop").unwrap()
    })
}

fn labeled_scores(max_level: u32) -> impl Strategy<Value = Vec<LabeledScore>> {
    prop::collection::vec((0..max_level, any::<bool>()), 2..80).prop_map(|rows| {
        let mut v: Vec<LabeledScore> = rows.into_iter().map(|(s, m)| (s as f64 / 3.0, label(m))).collect();
        v[0].1 = Label::Member;
        v[1].1 = Label::Nonmember;
        v
    })
}

fn pair_count(scores: &[LabeledScore]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for m in scores.iter().filter(|s| s.1.is_member()) {
        for n in scores.iter().filter(|s| !s.1.is_member()) {
            pairs += 1.0;
            if m.0 > n.0 {
                credit += 1.0;
            } else if m.0 == n.0 {
                credit += 0.5;
            }
        }
    }
    credit / pairs
}

fn flip(scores: &[LabeledScore]) -> Vec<LabeledScore> {
    scores.iter().map(|&(s, l)| (s, label(!l.is_member()))).collect()
}

fn toy_model(order: usize) -> NgramModel {
    NgramModel::train(
        ["abracadabra", "the cat sat", "abba", "\u{e9}t\u{e9}"],
        order,
        0.1,
        geometric_weights(order),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn pool_and_eval_partition_the_dataset(d in dataset_strategy(), seed in any::<u64>(), frac in 0.0..1.0f64) {
        let pool_size = (d.count(Label::Nonmember) as f64 * frac) as usize;
        let (pool, eval) = split_prefix_pool(&d, pool_size, seed).unwrap();
        prop_assert_eq!(pool.len(), pool_size);
        prop_assert_eq!(pool.len() + eval.len(), d.len());
        prop_assert!(pool.shots().iter().all(|r| r.label == Label::Nonmember));
        for shot in pool.shots() {
            prop_assert!(eval.records().iter().all(|r| r.id != shot.id));
        }
    }

    #[test]
    fn jsonl_round_trip_is_byte_identical(d in dataset_strategy()) {
        let mut first = Vec::new();
        write_jsonl(d.records(), &mut first).unwrap();
        let back = parse_jsonl(&first[..], "again", &FieldAliases::default()).unwrap();
        prop_assert_eq!(back.records(), d.records());
        let mut second = Vec::new();
        write_jsonl(back.records(), &mut second).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn auc_equals_pair_count(scores in labeled_scores(8)) {
        let oracle = pair_count(&scores);
        prop_assert!((auc(&scores).unwrap() - oracle).abs() <= 1e-9);
        prop_assert!((roc_curve(&scores).unwrap().area() - oracle).abs() <= 1e-9);
    }

    #[test]
    fn label_flip_is_antisymmetric(scores in labeled_scores(6)) {
        let flipped = flip(&scores);
        prop_assert!((auc(&scores).unwrap() + auc(&flipped).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn label_flip_without_ties_is_exact_complement(scores in labeled_scores(1_000_000)) {
        let mut seen: Vec<f64> = scores.iter().map(|s| s.0).collect();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        prop_assume!(seen.len() == scores.len());
        prop_assert!((auc(&flip(&scores)).unwrap() - (1.0 - auc(&scores).unwrap())).abs() <= 1e-12);
    }

    #[test]
    fn metrics_ignore_strictly_increasing_transforms(scores in labeled_scores(10), shift in -5.0..5.0f64) {
        let moved: Vec<LabeledScore> = scores.iter().map(|&(s, l)| ((s + shift).exp() * 3.0 + s, l)).collect();
        prop_assert_eq!(auc(&scores).unwrap(), auc(&moved).unwrap());
        for cap in [0.01, 0.1, 0.5] {
            prop_assert_eq!(tpr_at_fpr(&scores, cap).unwrap(), tpr_at_fpr(&moved, cap).unwrap());
        }
    }

    #[test]
    fn roc_is_monotone(scores in labeled_scores(12)) {
        let curve = roc_curve(&scores).unwrap();
        for w in curve.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        let last = curve.points.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn mink_at_full_coverage_is_loss(lps in prop::collection::vec(-30.0..=0.0f64, 1..200)) {
        let ts = TokenScores::from_logprobs(lps).unwrap();
        prop_assert_eq!(mink_score(&ts, 100.0).unwrap().to_bits(), loss_score(&ts).unwrap().to_bits());
    }

    #[test]
    fn recall_is_scale_invariant(cond in -50.0..-0.01f64, uncond in -50.0..-0.01f64, c in 0.01..100.0f64) {
        let a = recall_score(cond, uncond).unwrap();
        let b = recall_score(c * cond, c * uncond).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn chain_rule_holds_without_eos(a in "[a-e\u{e9} ]{0,12}", b in "[a-e\u{e9} ]{1,12}", order in 1usize..5) {
        let backend = NgramBackend::new(toy_model(order)).score_eos(false);
        let whole = format!("{a}{b}");
        let lhs = sequence_ll(&backend.score_target("", &whole).unwrap()).unwrap().sum_ll;
        let head = if a.is_empty() { 0.0 } else { sequence_ll(&backend.score_target("", &a).unwrap()).unwrap().sum_ll };
        let tail = sequence_ll(&backend.score_target(&a, &b).unwrap()).unwrap().sum_ll;
        prop_assert!((lhs - head - tail).abs() <= 1e-9);
    }

    #[test]
    fn scoring_is_pure(ctx in "[a-z ]{0,10}", target in "[a-z ]{1,10}") {
        let backend = NgramBackend::new(toy_model(3));
        prop_assert_eq!(backend.score_target(&ctx, &target).unwrap(), backend.score_target(&ctx, &target).unwrap());
    }

    #[test]
    fn distribution_normalizes_at_any_history(history in prop::collection::vec(any::<u8>(), 0..8), order in 1usize..6) {
        let model = toy_model(order);
        let total: f64 = Symbol::all().map(|s| model.token_logprob(&history, s).exp()).sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn model_file_round_trip(history in prop::collection::vec(any::<u8>(), 0..6), next in 0u16..257) {
        let model = toy_model(4);
        let back = NgramModel::from_json(&model.to_json().unwrap()).unwrap();
        let s = Symbol::from_index(next).unwrap();
        prop_assert!((model.token_logprob(&history, s) - back.token_logprob(&history, s)).abs() <= 1e-15);
    }

    #[test]
    fn groups_concatenate_back_to_shots(n in 1usize..30, g_seed in any::<usize>()) {
        let shots: Vec<Record> = (0..n).map(|i| Record::new(format!("s{i}"), format!("shot {i}"), Label::Nonmember)).collect();
        let g = 1 + g_seed % n;
        let groups = group_shots(&shots, g).unwrap();
        prop_assert_eq!(groups.len(), g);
        prop_assert_eq!(groups.concat(), shots);
    }

    #[test]
    fn prefix_text_is_derived_from_shots(texts in prop::collection::vec("[a-z]{1,6}", 1..6), sep in "[\n ,]{0,2}") {
        let shots: Vec<Record> = texts.iter().enumerate().map(|(i, t)| Record::new(format!("p{i}"), t.clone(), Label::Nonmember)).collect();
        let p = build_prefix(shots, &sep).unwrap();
        let expected: String = texts.iter().map(|t| format!("{t}{sep}")).collect();
        prop_assert_eq!(p.text(), expected.as_str());
    }

    #[test]
    fn similarity_modes_are_ordered(
        docs in prop::collection::vec("(alpha|beta|gamma|delta|omega)( (alpha|beta|gamma|delta|omega)){0,6}", 4..15),
        n_frac in 0.0..1.0f64,
    ) {
        let records: Vec<Record> = docs.iter().enumerate().map(|(i, t)| Record::new(format!("d{i:02}"), t.clone(), Label::Nonmember)).collect();
        let index = build_tfidf(&records).unwrap();
        let target = &records[0];
        let candidates = &records[1..];
        let n = 1 + ((candidates.len() - 1) as f64 * n_frac) as usize;
        let sims = |mode| {
            let mut s: Vec<f64> = select_dynamic(&index, target, candidates, n, mode, 0)
                .unwrap()
                .iter()
                .map(|r| index.similarity(target, r))
                .collect();
            s.sort_by(|a, b| b.total_cmp(a));
            s
        };
        let (most, moderate, least) = (sims(SimilarityMode::Most), sims(SimilarityMode::Moderate), sims(SimilarityMode::Least));
        for i in 0..n {
            prop_assert!(most[i] >= moderate[i] - 1e-12);
            prop_assert!(moderate[i] >= least[i] - 1e-12);
        }
        prop_assert_eq!(rank_by_similarity(&index, target, candidates).len(), candidates.len());
    }

    #[test]
    fn tfidf_vectors_are_unit_or_zero(docs in prop::collection::vec("[a-d ]{0,20}", 1..10)) {
        let records: Vec<Record> = docs.iter().enumerate().map(|(i, t)| Record::new(format!("t{i}"), format!("{t}."), Label::Nonmember)).collect();
        let index = build_tfidf(&records).unwrap();
        for r in &records {
            let norm: f64 = index.vector(r).iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn position_counts_never_increase(rows in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 0..20), 1..20)) {
        let profile = mean_by_position(&rows);
        for w in profile.windows(2) {
            prop_assert!(w[1].n_sequences <= w[0].n_sequences);
        }
        let longest = rows.iter().map(Vec::len).max().unwrap();
        prop_assert_eq!(profile.len(), longest);
    }
}
