// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use cuekit::activations::{
    max_pool_tokens, read_decoder, read_dump_all, write_decoder, write_dump, ActivationRecord,
    DecoderMatrix, DumpManifest, FeatureId, LayerActivations,
};
use cuekit::corpus::{Assertion, Corpus};
use cuekit::cue::{
    bias_score, build_prototypes, concentration_index, cue_project, CueVector, PrototypeSet,
};
use cuekit::eval::{
    compare_pair, ensemble_score, faithfulness_from_cosine, fluency_from_loglik, Judge, JudgeInput,
    ProxyJudge, RawCosineJudge, WinTieLoss,
};
use cuekit::probes::{loss_and_gradient, macro_f1, stratified_split, train_probe, ProbeHyper};
use cuekit::selection::{
    mutual_information, quantize, score_features, select_features, MiScore, QuantizationScheme,
};
use cuekit::steering::{
    decode_delta, select_alpha, steering_delta, AlphaPolicy, AlphaScore, SteeringOptions,
};
use cuekit::toymodel::{ToyConfig, ToyTransformer};

/// Independent plug-in MI: entropies from count tables,
/// `H(X) + H(Y) - H(X, Y)`.
fn mi_by_entropies(xs: &[usize], ys: &[usize]) -> f64 {
    fn entropy<K: Ord>(counts: &BTreeMap<K, usize>, n: f64) -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.log2()
            })
            .sum()
    }
    let n = xs.len() as f64;
    let mut hx = BTreeMap::new();
    let mut hy = BTreeMap::new();
    let mut hxy = BTreeMap::new();
    for (&x, &y) in xs.iter().zip(ys) {
        *hx.entry(x).or_insert(0) += 1;
        *hy.entry(y).or_insert(0) += 1;
        *hxy.entry((x, y)).or_insert(0) += 1;
    }
    entropy(&hx, n) + entropy(&hy, n) - entropy(&hxy, n)
}

fn paired_bins() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(0usize..4, n),
            prop::collection::vec(0usize..5, n),
        )
    })
}

fn mi_scores() -> impl Strategy<Value = Vec<MiScore>> {
    prop::collection::btree_map(
        (0u32..3, 0u32..50),
        prop_oneof![Just(0.0), 0.0f64..2.0],
        1..40,
    )
    .prop_filter("some information", |m| m.values().any(|&b| b > 0.0))
    .prop_map(|m| {
        m.into_iter()
            .map(|((layer, index), bits)| MiScore {
                feature: FeatureId::new(layer, index),
                bits,
            })
            .collect()
    })
}

fn sparse_layer(width: u32) -> impl Strategy<Value = LayerActivations> {
    prop::collection::btree_map(0..width, 0.001f32..50.0, 0..(width as usize).min(8))
        .prop_map(|m| LayerActivations::from_entries(m.into_iter().collect()).unwrap())
}

/// Records over one layer of width 12 with labels drawn from `k` classes,
/// every class present.
fn labelled_records(k: usize) -> impl Strategy<Value = Vec<ActivationRecord>> {
    prop::collection::vec(sparse_layer(12), k..(k + 20)).prop_map(move |layers| {
        layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                ActivationRecord::new(format!("r{i}"), format!("c{}", i % k)).with_layer(0, l)
            })
            .collect()
    })
}

fn proto_set(rows: Vec<Vec<f64>>) -> PrototypeSet {
    let labels = (0..rows.len()).map(|i| format!("c{i}")).collect();
    let counts = vec![1; rows.len()];
    PrototypeSet::from_prototypes(labels, counts, rows, String::new())
}

fn proto_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6, 1usize..6)
        .prop_flat_map(|(k, d)| prop::collection::vec(prop::collection::vec(0.0f64..10.0, d), k))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mi_agrees_with_entropy_identity((xs, ys) in paired_bins()) {
        let mi = mutual_information(&xs, &ys).unwrap();
        let oracle = mi_by_entropies(&xs, &ys);
        prop_assert!((mi - oracle.max(0.0)).abs() < 1e-10, "{mi} vs {oracle}");
        let h = |v: &[usize]| mi_by_entropies(v, v);
        prop_assert!(mi >= 0.0);
        prop_assert!(mi <= h(&xs).min(h(&ys)) + 1e-10);
    }

    #[test]
    fn mi_invariant_under_relabeling((xs, ys) in paired_bins(), shift in 1usize..7) {
        let relabeled: Vec<usize> = ys.iter().map(|y| (y + shift) * 3).collect();
        prop_assert_eq!(
            mutual_information(&xs, &ys).unwrap(),
            mutual_information(&xs, &relabeled).unwrap()
        );
    }

    #[test]
    fn binary_quantization_is_activity(values in prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..9.0], 1..30)) {
        let bins = quantize(&values, &QuantizationScheme::default());
        for (v, b) in values.iter().zip(&bins) {
            prop_assert_eq!(*b, usize::from(*v > 0.0));
        }
    }

    #[test]
    fn selection_is_minimal_ranked_prefix(scores in mi_scores(), rho in 0.01f64..=1.0) {
        let sel = select_features(scores, rho).unwrap();
        for w in sel.ranked.windows(2) {
            let ordered = w[0].bits > w[1].bits
                || (w[0].bits == w[1].bits && w[0].feature < w[1].feature);
            prop_assert!(ordered, "{:?} before {:?}", w[0], w[1]);
        }
        prop_assert_eq!(&sel.selected[..], &sel.ranked[..sel.len()]);
        let kept: f64 = sel.selected.iter().map(|s| s.bits).sum();
        prop_assert!(kept >= rho * sel.total_bits - 1e-12);
        let without_last = kept - sel.selected.last().unwrap().bits;
        prop_assert!(without_last < rho * sel.total_bits);
    }

    #[test]
    fn selection_grows_with_rho(scores in mi_scores(), a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let s_lo = select_features(scores.clone(), lo).unwrap();
        let s_hi = select_features(scores, hi).unwrap();
        prop_assert!(s_lo.len() <= s_hi.len());
        prop_assert_eq!(&s_lo.selected[..], &s_hi.selected[..s_lo.len()]);
    }

    #[test]
    fn sparse_dense_roundtrip(layer in sparse_layer(20)) {
        let dense = layer.to_dense(20);
        prop_assert_eq!(LayerActivations::from_dense(&dense).unwrap(), layer);
    }

    #[test]
    fn max_pool_dominates_and_ignores_order(mut toks in prop::collection::vec(sparse_layer(10), 1..6)) {
        let pooled = max_pool_tokens(&toks, 10).unwrap();
        for t in &toks {
            for &(i, v) in t.entries() {
                prop_assert!(pooled.get(i) >= v);
            }
        }
        for &(i, v) in pooled.entries() {
            prop_assert!(toks.iter().any(|t| t.get(i) == v));
        }
        toks.reverse();
        prop_assert_eq!(max_pool_tokens(&toks, 10).unwrap(), pooled);
    }

    #[test]
    fn decoding_is_linear(
        (rows, cols, values, x, y) in (1usize..8, 1usize..8).prop_flat_map(|(r, c)| (
            Just(r),
            Just(c),
            prop::collection::vec(-3.0f64..3.0, r * c),
            prop::collection::vec(-2.0f64..2.0, r),
            prop::collection::vec(-2.0f64..2.0, r),
        )),
        a in -3.0f64..3.0,
    ) {
        let m = DecoderMatrix::new(0, rows, cols, values.clone()).unwrap();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
        let lhs = m.decode_dense(&combo).unwrap();
        let dx = m.decode_dense(&x).unwrap();
        let dy = m.decode_dense(&y).unwrap();
        for j in 0..cols {
            prop_assert!(close(lhs[j], a * dx[j] + dy[j], 1e-9));
            let naive: f64 = (0..rows).map(|i| x[i] * values[i * cols + j]).sum();
            prop_assert!(close(dx[j], naive, 1e-9));
        }
    }

    #[test]
    fn steering_deltas_sum_to_zero(rows in proto_rows()) {
        let protos = proto_set(rows);
        let mut sum = vec![0.0; protos.dim()];
        for l in &protos.labels {
            let d = steering_delta(&protos, l).unwrap();
            for (s, x) in sum.iter_mut().zip(&d.delta) {
                *s += x;
            }
        }
        prop_assert!(sum.iter().all(|s| s.abs() < 1e-9), "{sum:?}");
    }

    #[test]
    fn centered_prototypes_sum_to_zero(rows in proto_rows()) {
        let protos = proto_set(rows);
        for j in 0..protos.dim() {
            let s: f64 = protos.centered.iter().map(|r| r[j]).sum();
            prop_assert!(s.abs() < 1e-9);
        }
    }

    #[test]
    fn prototypes_are_label_means(recs in labelled_records(3)) {
        let scores = score_features(&recs, &QuantizationScheme::default()).unwrap();
        prop_assume!(scores.iter().any(|s| s.bits > 0.0));
        let sel = select_features(scores, 1.0).unwrap();
        let protos = build_prototypes(&recs, &sel).unwrap();
        for (c, label) in protos.labels.iter().enumerate() {
            let members: Vec<&ActivationRecord> = recs.iter().filter(|r| &r.label == label).collect();
            prop_assert_eq!(protos.counts[c], members.len());
            for (j, f) in sel.features().iter().enumerate() {
                let mean = members.iter().map(|r| f64::from(r.get(*f).unwrap_or(0.0))).sum::<f64>()
                    / members.len() as f64;
                prop_assert!(close(protos.prototypes[c][j], mean, 1e-12));
            }
        }
    }

    #[test]
    fn bias_cosines_bounded_and_argmax_maximal(rows in proto_rows(), seed in any::<u64>()) {
        let protos = proto_set(rows);
        let mut r = cuekit::rng::seeded(seed);
        let v = CueVector((0..protos.dim()).map(|_| 10.0 * cuekit::rng::unit(&mut r)).collect());
        let b = bias_score(&v, &protos).unwrap();
        let best = b.cosines.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for c in &b.cosines {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(c));
        }
        let idx = protos.label_index(&b.argmax).unwrap();
        prop_assert!(b.cosines[idx] >= best - 1e-12);
    }

    #[test]
    fn concentration_bounded_and_permutation_invariant(
        w in prop::collection::vec(0.0f64..1.0, 1..25).prop_filter("mass", |w| w.iter().sum::<f64>() > 1e-6),
        seed in any::<u64>(),
    ) {
        let total: f64 = w.iter().sum();
        let shares: Vec<f64> = w.iter().map(|x| x / total).collect();
        let k = shares.len();
        let c = concentration_index(&shares).unwrap();
        prop_assert!(c >= -1e-12 && c <= 1.0 - 1.0 / k as f64 + 1e-12);
        let mut r = cuekit::rng::seeded(seed);
        let perm = cuekit::rng::choose_distinct(&mut r, k, k);
        let permuted: Vec<f64> = perm.iter().map(|&i| shares[i]).collect();
        prop_assert!((concentration_index(&permuted).unwrap() - c).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_equivariant_under_class_permutation(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40),
        seed in any::<u64>(),
    ) {
        let (pred, gold): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let f = macro_f1(&pred, &gold, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        let mut r = cuekit::rng::seeded(seed);
        let pi = cuekit::rng::choose_distinct(&mut r, 4, 4);
        let pp: Vec<usize> = pred.iter().map(|&c| pi[c]).collect();
        let pg: Vec<usize> = gold.iter().map(|&c| pi[c]).collect();
        prop_assert!((macro_f1(&pp, &pg, 4).unwrap() - f).abs() < 1e-12);
        prop_assert_eq!(macro_f1(&gold, &gold, 4).unwrap(), 1.0);
    }

    #[test]
    fn stratified_split_partitions(labels in prop::collection::vec(0usize..4, 1..60), seed in any::<u64>()) {
        let (train, test) = stratified_split(&labels, 0.2, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        let train_labels: BTreeSet<usize> = train.iter().map(|&i| labels[i]).collect();
        let every: BTreeSet<usize> = labels.iter().copied().collect();
        prop_assert_eq!(train_labels, every);
    }

    #[test]
    fn sampling_keeps_a_subset_in_file_order(
        labels in prop::collection::vec(0usize..3, 1..40),
        n in 1usize..10,
        seed in any::<u64>(),
    ) {
        let records: Vec<Assertion> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| Assertion { id: format!("a{i}"), label: format!("L{l}"), text: format!("t{i}") })
            .collect();
        let corpus = Corpus::from_records(records.clone()).unwrap();
        let s = corpus.sample_per_label(n, seed).unwrap();
        let mut last = None;
        for r in s.corpus.records() {
            let pos = records.iter().position(|x| x.id == r.id).unwrap();
            prop_assert!(last.is_none_or(|p| pos > p));
            last = Some(pos);
        }
        for (label, have) in corpus.label_counts() {
            let got = s.corpus.records().iter().filter(|r| r.label == label).count();
            prop_assert_eq!(got, have.min(n));
        }
    }

    #[test]
    fn judge_mappings_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0, ll in -10.0f64..0.0, ll2 in -10.0f64..0.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(faithfulness_from_cosine(lo) <= faithfulness_from_cosine(hi));
        let (l1, l2) = if ll <= ll2 { (ll, ll2) } else { (ll2, ll) };
        prop_assert!(fluency_from_loglik(l1, -1.0) <= fluency_from_loglik(l2, -1.0));
        for s in [faithfulness_from_cosine(a), fluency_from_loglik(ll, ll2)] {
            prop_assert!((1.0..=10.0).contains(&s));
        }
    }

    #[test]
    fn pairwise_is_antisymmetric(l in prop::array::uniform2(1.0f64..10.0), r in prop::array::uniform2(1.0f64..10.0), swap in any::<bool>()) {
        let (_, a) = compare_pair(l, r, swap);
        let (_, b) = compare_pair(r, l, !swap);
        let flipped = match a {
            WinTieLoss::Win => WinTieLoss::Loss,
            WinTieLoss::Loss => WinTieLoss::Win,
            WinTieLoss::Tie => WinTieLoss::Tie,
        };
        prop_assert_eq!(b, flipped);
    }

    #[test]
    fn ensemble_ignores_judge_order(rows in proto_rows(), seed in any::<u64>(), share in 0.0f64..1.0) {
        let protos = proto_set(rows);
        let mut r = cuekit::rng::seeded(seed);
        let v = CueVector((0..protos.dim()).map(|_| 5.0 * cuekit::rng::unit(&mut r)).collect());
        let input = JudgeInput {
            response: &v,
            target: &protos.labels[0],
            protos: &protos,
            universal_share: share,
            loglik: -2.0,
            ll_ref: -1.5,
        };
        let (p, q) = (ProxyJudge, RawCosineJudge);
        let forward: [&dyn Judge; 3] = [&p, &q, &p];
        let backward: [&dyn Judge; 3] = [&p, &p, &q];
        let x = ensemble_score(&forward, &input).unwrap();
        let y = ensemble_score(&backward, &input).unwrap();
        prop_assert!(close(x.faithfulness, y.faithfulness, 1e-12));
        prop_assert!(close(x.rarity, y.rarity, 1e-12));
        prop_assert!(close(x.fluency, y.fluency, 1e-12));
        prop_assert!(x.rarity <= x.faithfulness + 1e-12);
    }

    #[test]
    fn alpha_choice_is_smallest_qualifier_and_monotone_in_baseline(
        table in prop::collection::btree_map(prop::sample::select(vec![0.25, 0.5, 1.0, 2.0]).prop_map(|a: f64| (a * 4.0) as u32), (1.0f64..10.0, 1.0f64..10.0), 1..5),
        base in 1.0f64..10.0,
        bump in 0.0f64..5.0,
    ) {
        let rows: Vec<(f64, AlphaScore)> = table
            .into_iter()
            .map(|(a4, (c, f))| (f64::from(a4) / 4.0, AlphaScore { cultural: c, fluency: f }))
            .collect();
        let policy = AlphaPolicy::default();
        let got = select_alpha(&rows, base, &policy).unwrap();
        let want = rows
            .iter()
            .filter(|(_, s)| s.cultural > base && s.fluency >= policy.fluency_floor)
            .map(|(a, _)| *a)
            .fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.min(a))));
        prop_assert_eq!(got, want);
        let harder = select_alpha(&rows, base + bump, &policy).unwrap();
        match (got, harder) {
            (_, None) => {}
            (Some(x), Some(y)) => prop_assert!(y >= x),
            (None, Some(_)) => prop_assert!(false, "raising the baseline enabled a choice"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn probe_gradient_matches_finite_differences(
        (d, k, xs, ys, w, b) in (1usize..4, 2usize..4).prop_flat_map(|(d, k)| (
            Just(d),
            Just(k),
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), 6),
            prop::collection::vec(0..k, 6),
            prop::collection::vec(-1.0f64..1.0, d * k),
            prop::collection::vec(-1.0f64..1.0, k),
        )),
        l2 in 0.0f64..0.1,
    ) {
        let (loss, gw, gb) = loss_and_gradient(&xs, &ys, k, l2, &w, &b).unwrap();
        prop_assert!(loss.is_finite());
        let h = 1e-6;
        for i in 0..d * k {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            let fd = (loss_and_gradient(&xs, &ys, k, l2, &wp, &b).unwrap().0
                - loss_and_gradient(&xs, &ys, k, l2, &wm, &b).unwrap().0)
                / (2.0 * h);
            prop_assert!((fd - gw[i]).abs() <= 1e-4 * gw[i].abs().max(1e-2), "w[{i}]: {fd} vs {}", gw[i]);
        }
        for c in 0..k {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[c] += h;
            bm[c] -= h;
            let fd = (loss_and_gradient(&xs, &ys, k, l2, &w, &bp).unwrap().0
                - loss_and_gradient(&xs, &ys, k, l2, &w, &bm).unwrap().0)
                / (2.0 * h);
            prop_assert!((fd - gb[c]).abs() <= 1e-4 * gb[c].abs().max(1e-2), "b[{c}]: {fd} vs {}", gb[c]);
        }
    }

    #[test]
    fn probe_loss_never_increases(
        xs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 8..20),
        seed in any::<u64>(),
    ) {
        let ys: Vec<usize> = (0..xs.len()).map(|i| i % 2).collect();
        let hyper = ProbeHyper { epochs: 30, lr: 5.0, l2: 1e-3, seed };
        let probe = train_probe(&xs, &ys, 2, &hyper).unwrap();
        for w in probe.loss_history.windows(2) {
            prop_assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn dump_and_decoder_roundtrip(
        recs in prop::collection::vec((sparse_layer(16), sparse_layer(5)), 0..12),
        values in prop::collection::vec(-5.0f32..5.0, 12),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<ActivationRecord> = recs
            .into_iter()
            .enumerate()
            .map(|(i, (a, b))| ActivationRecord::new(format!("id{i}"), "x").with_layer(0, a).with_layer(3, b))
            .collect();
        let manifest = DumpManifest::new("prop", vec![(0, 16, 4), (3, 5, 4)]).unwrap();
        write_dump(dir.path(), &manifest, &records).unwrap();
        let (m2, back) = read_dump_all(dir.path()).unwrap();
        prop_assert_eq!(m2.record_count, records.len() as u64);
        prop_assert_eq!(back, records);

        let m = DecoderMatrix::new(3, 3, 4, values.iter().map(|&v| f64::from(v)).collect()).unwrap();
        let p = dir.path().join("d.bin");
        write_decoder(&p, &m).unwrap();
        prop_assert_eq!(read_decoder(&p).unwrap(), m);
    }

    #[test]
    fn cue_projection_reads_selected_values(recs in labelled_records(2)) {
        let scores = score_features(&recs, &QuantizationScheme::default()).unwrap();
        prop_assume!(scores.iter().any(|s| s.bits > 0.0));
        let sel = select_features(scores, 1.0).unwrap();
        for r in &recs {
            let v = cue_project(r, &sel).unwrap();
            for (j, f) in sel.features().iter().enumerate() {
                prop_assert_eq!(v.0[j], f64::from(r.get(*f).unwrap()));
            }
        }
    }
}

fn small_model() -> ToyTransformer {
    ToyTransformer::random(&ToyConfig {
        vocab: 16,
        max_seq: 12,
        d_model: 8,
        d_sae: 16,
        ..ToyConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_alpha_steering_is_a_no_op(tokens in prop::collection::vec(0usize..16, 1..12), target in 0usize..2) {
        let model = small_model();
        let rows = vec![vec![3.0, 0.0, 1.0], vec![0.0, 2.0, 1.0]];
        let protos = proto_set(rows);
        let sel = select_features(
            vec![
                MiScore { feature: FeatureId::new(0, 1), bits: 1.0 },
                MiScore { feature: FeatureId::new(1, 4), bits: 0.9 },
                MiScore { feature: FeatureId::new(1, 7), bits: 0.8 },
            ],
            1.0,
        )
        .unwrap();
        let decoders: BTreeMap<u32, DecoderMatrix> = (0..2)
            .map(|l| {
                let values = cuekit::toymodel::random_dictionary(16, 8, u64::from(l));
                (l, DecoderMatrix::new(l, 16, 8, values).unwrap())
            })
            .collect();
        let dir = steering_delta(&protos, &protos.labels[target]).unwrap();
        let set = decode_delta(&dir, &sel, &decoders, &SteeringOptions::default())
            .unwrap()
            .with_alpha(0.0);
        let plain = model.forward_with_hooks(&tokens, None).unwrap();
        let steered = model.forward_with_hooks(&tokens, Some(&set)).unwrap();
        prop_assert_eq!(plain, steered);
    }
}
