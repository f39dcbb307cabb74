use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use expnet_core::baseline::{aggregate_to_words, binarize_topk, random_baseline};
use expnet_core::expnet::{predict, threshold_with_fallback};
use expnet_core::features::{extract_features, project_labels};
use expnet_core::harness::{merge_rationales, MergePolicy};
use expnet_core::metrics::{self, accumulate, dataset_f1, pooled_auroc, BootstrapConfig, ScoredExample};
use expnet_core::trace::{filter_correct, load_traces, write_traces, AnnotatorRationale};
use expnet_core::{AttentionTrace, Error, ExpNetModel, FeatureMask};

fn softmax_row(rng: &mut ChaCha8Rng, t: usize) -> Vec<f32> {
    let w: Vec<f32> = (0..t).map(|_| rng.random_range(0.0f32..4.0).exp()).collect();
    let z: f32 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

/// A valid trace built from raw parameters: head count, subtokens per word,
/// position of the aggregation token (front or back), and a content seed.
fn build_trace(id: usize, heads: usize, pieces: &[usize], cls_last: bool, seed: u64) -> AttentionTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::new();
    let mut word_ids = Vec::new();
    if !cls_last {
        tokens.push("[CLS]".to_string());
        word_ids.push(None);
    }
    for (w, &p) in pieces.iter().enumerate() {
        for i in 0..p {
            tokens.push(if i == 0 { format!("w{w}") } else { format!("##p{i}") });
            word_ids.push(Some(w));
        }
    }
    tokens.push("[SEP]".into());
    word_ids.push(None);
    if cls_last {
        tokens.push("<s>".into());
        word_ids.push(None);
    }
    let t = tokens.len();
    let cls = if cls_last { t - 1 } else { 0 };
    let task_to_token: Vec<Vec<f32>> = (0..heads).map(|_| softmax_row(&mut rng, t)).collect();
    let token_to_task: Vec<Vec<f32>> = (0..heads)
        .map(|h| {
            (0..t)
                .map(|j| if j == cls { task_to_token[h][cls] } else { rng.random() })
                .collect()
        })
        .collect();
    let n_annotators = rng.random_range(1..=3);
    let rationales = (0..n_annotators)
        .map(|a| AnnotatorRationale {
            annotator_id: format!("a{a}"),
            mask: pieces.iter().map(|_| rng.random_bool(0.4)).collect(),
        })
        .collect();
    let label_gold = rng.random_range(0..3);
    AttentionTrace {
        example_id: format!("ex{id}"),
        dataset_id: "prop".into(),
        tokens,
        cls_index: cls,
        word_ids,
        num_heads: heads,
        attn_task_to_token: task_to_token,
        attn_token_to_task: token_to_task,
        label_gold,
        label_pred: if rng.random_bool(0.8) { label_gold } else { label_gold + 1 },
        rationales,
    }
}

fn arb_trace() -> impl Strategy<Value = AttentionTrace> {
    (1usize..5, prop::collection::vec(1usize..4, 1..8), any::<bool>(), any::<u64>())
        .prop_map(|(h, pieces, cls_last, seed)| build_trace(0, h, &pieces, cls_last, seed))
}

fn arb_traces() -> impl Strategy<Value = Vec<AttentionTrace>> {
    prop::collection::vec(arb_trace(), 0..5).prop_map(|mut v| {
        for (i, t) in v.iter_mut().enumerate() {
            t.example_id = format!("ex{i}");
        }
        v
    })
}

fn mask_strategy() -> impl Strategy<Value = FeatureMask> {
    prop_oneof![
        Just(FeatureMask::Full),
        Just(FeatureMask::TaskToTokenOnly),
        Just(FeatureMask::TokenToTaskOnly)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trace_roundtrip_is_bit_exact(traces in arb_traces()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_traces(&traces, &path).unwrap();
        let back = load_traces(&path).unwrap();
        prop_assert_eq!(&back, &traces);
        for (a, b) in back.iter().zip(&traces) {
            let bits = |t: &AttentionTrace| -> Vec<u32> {
                t.attn_task_to_token.iter().chain(&t.attn_token_to_task).flatten().map(|x| x.to_bits()).collect()
            };
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn filter_correct_is_a_subset_of_correct_traces(traces in arb_traces()) {
        let kept = filter_correct(traces.clone());
        prop_assert!(kept.iter().all(|t| t.label_pred == t.label_gold && traces.contains(t)));
        prop_assert_eq!(kept.len(), traces.iter().filter(|t| t.is_correct()).count());
    }

    #[test]
    fn feature_halves_are_the_single_masks(trace in arb_trace()) {
        let full = extract_features(&trace, FeatureMask::Full);
        let t2k = extract_features(&trace, FeatureMask::TaskToTokenOnly);
        let k2t = extract_features(&trace, FeatureMask::TokenToTaskOnly);
        let h = trace.num_heads;
        prop_assert_eq!(full.len(), trace.candidate_tokens().count());
        for ((f, a), b) in full.iter().zip(&t2k).zip(&k2t) {
            prop_assert_eq!(f.values.len(), 2 * h);
            prop_assert_eq!(&f.values[..h], &a.values[..]);
            prop_assert_eq!(&f.values[h..], &b.values[..]);
        }
    }

    #[test]
    fn head_permutation_permutes_features(trace in arb_trace(), seed in any::<u64>()) {
        let h = trace.num_heads;
        let mut perm: Vec<usize> = (0..h).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let mut permuted = trace.clone();
        permuted.attn_task_to_token = perm.iter().map(|&p| trace.attn_task_to_token[p].clone()).collect();
        permuted.attn_token_to_task = perm.iter().map(|&p| trace.attn_token_to_task[p].clone()).collect();
        let a = extract_features(&trace, FeatureMask::Full);
        let b = extract_features(&permuted, FeatureMask::Full);
        for (fa, fb) in a.iter().zip(&b) {
            for (i, &p) in perm.iter().enumerate() {
                prop_assert_eq!(fb.values[i], fa.values[p]);
                prop_assert_eq!(fb.values[h + i], fa.values[h + p]);
            }
        }
    }

    #[test]
    fn label_projection_roundtrips_through_any_subtoken(trace in arb_trace(), mask in mask_strategy()) {
        let merged = merge_rationales(&trace, &MergePolicy::Union).unwrap().word_mask;
        let labeled = project_labels(&trace, &merged, mask).unwrap();
        let mut rebuilt = vec![false; trace.num_words()];
        for (lt, (j, w)) in labeled.iter().zip(trace.candidate_tokens()) {
            prop_assert_eq!(lt.feature.token_index, j);
            prop_assert_eq!(lt.target, merged[w]);
            prop_assert_eq!(lt.feature.values.len(), mask.input_dim(trace.num_heads));
            rebuilt[w] |= lt.target;
        }
        prop_assert_eq!(rebuilt, merged);
    }

    #[test]
    fn aggregation_dominates_constituent_tokens(
        trace in arb_trace(),
        raw in prop::collection::vec(-2.0f64..2.0, 32),
    ) {
        let scores = &raw[..trace.num_tokens().min(raw.len())];
        prop_assume!(scores.len() == trace.num_tokens());
        let words = aggregate_to_words(&trace, scores).unwrap();
        for (j, w) in trace.candidate_tokens() {
            prop_assert!(words[w] >= scores[j]);
        }
        for (w, &s) in words.iter().enumerate() {
            prop_assert!(trace.candidate_tokens().any(|(j, ww)| ww == w && scores[j] == s));
        }
    }

    #[test]
    fn topk_counts(scores in prop::collection::vec(-1.0f64..1.0, 0..20), k in 0usize..25) {
        let mask = binarize_topk(&scores, k);
        let ones = mask.iter().filter(|&&b| b).count();
        let candidates = scores.iter().filter(|&&s| s >= 0.0).count();
        prop_assert!(ones <= k);
        prop_assert_eq!(ones, k.min(candidates));
    }

    #[test]
    fn topk_is_rank_invariant(scores in prop::collection::vec(-1.0f64..1.0, 0..20), k in 0usize..25) {
        // strictly increasing, keeps the sign of every score
        let transformed: Vec<f64> = scores.iter().map(|s| s.powi(3) + 2.0 * s).collect();
        prop_assert_eq!(binarize_topk(&scores, k), binarize_topk(&transformed, k));
    }

    #[test]
    fn random_baseline_reproducible(trace in arb_trace(), rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let a = random_baseline(&trace, rate, seed).unwrap();
        let b = random_baseline(&trace, rate, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fallback_mask_is_never_empty(scores in prop::collection::vec(0.0f64..1.0, 1..20), thr in 0.0f64..=1.0) {
        prop_assert!(threshold_with_fallback(&scores, thr).iter().any(|&b| b));
    }

    #[test]
    fn predict_selects_a_word_and_bounds_scores(trace in arb_trace(), seed in any::<u64>(), bias in -40.0f64..40.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = ExpNetModel::zeros(trace.num_heads, 8, FeatureMask::Full);
        for p in model.params_mut() {
            *p = rng.random_range(-2.0..2.0);
        }
        model.b2 = bias;
        let e = predict(&model, &trace, 0.5).unwrap();
        prop_assert!(e.word_mask.iter().any(|&b| b));
        prop_assert!(e.word_scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
        let ts = e.token_scores.unwrap();
        prop_assert_eq!(ts[trace.cls_index], 0.0);
    }

    #[test]
    fn auroc_invariant_under_increasing_maps(
        pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..40),
    ) {
        prop_assume!(pairs.iter().any(|p| p.1) && pairs.iter().any(|p| !p.1));
        let mapped: Vec<(f64, bool)> = pairs.iter().map(|&(s, g)| (3.0 * s.exp() - 1.0, g)).collect();
        prop_assert_eq!(pooled_auroc(&pairs).unwrap(), pooled_auroc(&mapped).unwrap());
    }

    #[test]
    fn metrics_ignore_example_order(
        examples in prop::collection::vec(
            prop::collection::vec((any::<bool>(), any::<bool>(), 0.0f64..1.0), 1..6), 1..8),
        seed in any::<u64>(),
    ) {
        let ids: Vec<String> = (0..examples.len()).map(|i| format!("e{i}")).collect();
        let cols: Vec<(Vec<bool>, Vec<bool>, Vec<f64>)> = examples
            .iter()
            .map(|ex| (ex.iter().map(|x| x.0).collect(), ex.iter().map(|x| x.1).collect(), ex.iter().map(|x| x.2).collect()))
            .collect();
        let scored = |order: &[usize]| -> Vec<ScoredExample<'_>> {
            order.iter().map(|&i| ScoredExample {
                example_id: &ids[i],
                word_mask: &cols[i].0,
                gold: &cols[i].1,
                word_scores: &cols[i].2,
            }).collect()
        };
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let cfg = BootstrapConfig { iterations: 50, level: 0.9, seed: 1 };
        let a = metrics::evaluate("m", "d", &scored(&order), &cfg, false).unwrap();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let b = metrics::evaluate("m", "d", &scored(&order), &cfg, false).unwrap();
        prop_assert_eq!((a.precision, a.recall, a.f1), (b.precision, b.recall, b.f1));
        prop_assert_eq!((a.auroc, a.aupr), (b.auroc, b.aupr));
        for v in [a.precision, a.recall, a.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(a.f1_ci_low <= a.f1 && a.f1 <= a.f1_ci_high, "{} {} {}", a.f1_ci_low, a.f1, a.f1_ci_high);
        let counts: Vec<_> = cols.iter().map(|c| accumulate(&c.0, &c.1).unwrap()).collect();
        prop_assert_eq!(dataset_f1(&counts).unwrap().f1, a.f1);
    }

    #[test]
    fn alpha_ignores_annotator_order(
        rows in prop::collection::vec(prop::collection::vec(prop::option::of(any::<bool>()), 30), 2..5),
    ) {
        let mut rev = rows.clone();
        rev.reverse();
        match (metrics::krippendorff_alpha(&rows), metrics::krippendorff_alpha(&rev)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "{other:?}"),
        }
    }
}

#[test]
fn empty_trace_list_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    write_traces(&[], &path).unwrap();
    assert!(load_traces(&path).unwrap().is_empty());
}

#[test]
fn nan_attention_is_refused_on_write() {
    let mut t = build_trace(0, 2, &[1, 2], false, 4);
    t.attn_task_to_token[1][2] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let err = write_traces(&[t], dir.path().join("x.jsonl")).unwrap_err();
    assert!(matches!(err, Error::Validation { .. }), "{err}");
    assert!(err.to_string().contains("attention in [0, 1]"), "{err}");
}
