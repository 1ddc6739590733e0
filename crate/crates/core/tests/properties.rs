use opo_core::data::{generate_synthetic, read_jsonl, write_jsonl, Mode, SyntheticConfig};
use opo_core::diff::{ParameterSet, Tape};
use opo_core::losses::{bpr_loss, single_pair_loss, LossKind, LossSpec};
use opo_core::metrics::{approx_rank, dcg_at_k, discount, gain, max_dcg_at_k, ndcg_at_k, LabelVector};
use opo_core::scorer::{PolicyScorer, RewardScoreConfig, Scorer, ToyPolicy};
use opo_core::sorting::{neural_sort, sinkhorn_iterate, SINKHORN_MAX_ITERS};
use proptest::prelude::*;

fn labels_strategy(min: usize, max: usize) -> impl Strategy<Value = LabelVector> {
    prop::collection::vec(0.0..1.0f64, min..=max).prop_map(|mut v| {
        v.sort_by(|a, b| b.total_cmp(a));
        v[0] = v[0].max(0.05);
        LabelVector::new(v).unwrap()
    })
}

fn case(min: usize, max: usize) -> impl Strategy<Value = (LabelVector, Vec<f64>)> {
    labels_strategy(min, max).prop_flat_map(|l| {
        let n = l.len();
        (Just(l), prop::collection::vec(-3.0..3.0f64, n))
    })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_loss_is_shift_invariant((labels, s) in case(2, 8), c in -5.0..5.0f64) {
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        for kind in LossKind::ALL {
            let spec = LossSpec::new(kind);
            let a = spec.value(&s, &labels).unwrap();
            let b = spec.value(&shifted, &labels).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0) * 10.0, "{}: {} vs {}", kind, a, b);
        }
    }

    #[test]
    fn bpr_is_mean_of_single_pairs(s in prop::collection::vec(-4.0..4.0f64, 2..=10)) {
        let tape = Tape::new();
        let v = tape.vars(&s);
        let bpr = bpr_loss(&tape, &v).unwrap().value();
        let k = s.len();
        let pairs: f64 = (1..k)
            .map(|j| single_pair_loss(&tape, &[v[0], v[j]]).unwrap().value())
            .sum::<f64>() / (k - 1) as f64;
        prop_assert!((bpr - pairs).abs() <= 1e-12);
    }

    #[test]
    fn plackett_luce_sums_to_one(s in prop::collection::vec(-3.0..3.0f64, 2..=5)) {
        let k = s.len();
        let labels = LabelVector::new((0..k).map(|i| 1.0 - i as f64 / k as f64).collect()).unwrap();
        let spec = LossSpec::new(LossKind::ListMle);
        let total: f64 = permutations(k)
            .iter()
            .map(|p| {
                let permuted: Vec<f64> = p.iter().map(|&i| s[i]).collect();
                (-spec.value(&permuted, &labels).unwrap()).exp()
            })
            .sum();
        prop_assert!((total - 1.0).abs() <= 1e-8, "{}", total);
    }

    #[test]
    fn approx_ndcg_depends_on_alpha_times_beta(
        seed in 0u64..1000,
        alpha in 1.0..50.0f64,
        beta in 0.05..2.0f64,
    ) {
        let data = generate_synthetic(&SyntheticConfig {
            num_lists: 1,
            list_size: 5,
            mode: Mode::Policy,
            vocab: 6,
            max_len: 4,
            seed,
            ..SyntheticConfig::default()
        }).unwrap();
        let list = &data.lists()[0];
        let policy = ToyPolicy::random(6, 4, 1.0, seed).unwrap();
        let scorer = Scorer::Policy(PolicyScorer::with_reference(policy, ToyPolicy::uniform(6, 4).unwrap()).unwrap());
        let value = |a: f64, b: f64| {
            let s = scorer.score_list(list, RewardScoreConfig::new(b).unwrap()).unwrap();
            LossSpec::new(LossKind::ApproxNdcg).with_alpha(a).value(&s, &list.labels()).unwrap()
        };
        let base = value(alpha, beta);
        prop_assert!((base - value(4.0 * alpha, beta / 4.0)).abs() <= 1e-9);
        prop_assert!((base - value(alpha / 3.0, 3.0 * beta)).abs() <= 1e-9);
    }

    #[test]
    fn two_item_losses_fall_as_the_gap_grows(d in -10.0..10.0f64, step in 1e-3..1.0f64) {
        let labels = LabelVector::new(vec![1.0, 0.0]).unwrap();
        for kind in LossKind::ALL {
            let spec = LossSpec::new(kind);
            let lo = spec.value(&[d, 0.0], &labels).unwrap();
            let hi = spec.value(&[(d + step).min(10.0), 0.0], &labels).unwrap();
            prop_assert!(hi <= lo + 1e-12, "{}: {} then {}", kind, lo, hi);
        }
    }

    #[test]
    fn neural_sort_is_shift_and_scale_covariant(
        s in prop::collection::vec(-3.0..3.0f64, 2..=8),
        c in -5.0..5.0f64,
        a in 0.1..10.0f64,
        tau in 0.1..5.0f64,
    ) {
        let base = neural_sort(&s, tau).unwrap();
        let moved: Vec<f64> = s.iter().map(|v| a * v + c).collect();
        let other = neural_sort(&moved, a * tau).unwrap();
        for (x, y) in base.rows().iter().flatten().zip(other.rows().iter().flatten()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn sinkhorn_converges_for_near_hard_sorts(mut s in prop::collection::vec(-3.0..3.0f64, 2..=8)) {
        // space the scores so the relaxation is nearly a permutation
        for (i, v) in s.iter_mut().enumerate() {
            *v = v.round() * 16.0 + i as f64 * 0.5;
        }
        let p = neural_sort(&s, 1e-3).unwrap();
        let (_, stats) = sinkhorn_iterate(&p, SINKHORN_MAX_ITERS, 1e-6).unwrap();
        prop_assert!(stats.converged && stats.residual <= 1e-6, "{:?}", stats);
    }

    #[test]
    fn approx_ranks_sum_to_triangle(s in prop::collection::vec(-3.0..3.0f64, 1..=10), alpha in 0.1..100.0f64) {
        let k = s.len();
        let total: f64 = (0..k).map(|j| approx_rank(&s, alpha, j)).sum();
        prop_assert!((total - (k * (k + 1)) as f64 / 2.0).abs() <= 1e-9);
    }

    #[test]
    fn dcg_matches_brute_force((labels, s) in case(1, 6), k_frac in 0.0..1.0f64) {
        let n = labels.len();
        let k = 1 + ((n - 1) as f64 * k_frac).round() as usize;
        let psi = labels.as_slice();
        // place responses in score order, lower index first under ties
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let dcg: f64 = order[..k].iter().enumerate().map(|(r, &j)| gain(psi[j]) * discount(r + 1).unwrap()).sum();
        prop_assert!((dcg - dcg_at_k(&labels, &s, k).unwrap()).abs() <= 1e-12);
        let best = permutations(n)
            .iter()
            .map(|p| p[..k].iter().enumerate().map(|(r, &j)| gain(psi[j]) * discount(r + 1).unwrap()).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((best - max_dcg_at_k(&labels, k).unwrap()).abs() <= 1e-12);
        let ndcg = ndcg_at_k(&labels, &s, k).unwrap();
        prop_assert!(ndcg > 0.0 || psi[..].iter().filter(|&&p| p > 0.0).count() < n && ndcg >= 0.0);
        prop_assert!(ndcg <= 1.0 + 1e-15);
    }

    #[test]
    fn generated_lists_are_sorted_and_round_trip(seed in 0u64..10_000, policy in any::<bool>()) {
        let cfg = SyntheticConfig {
            num_lists: 5,
            list_size: 2 + (seed % 15) as usize,
            mode: if policy { Mode::Policy } else { Mode::Feature },
            seed,
            ..SyntheticConfig::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        for l in d.lists() {
            let v = l.label_values();
            prop_assert!(v.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        let mut buf = Vec::new();
        write_jsonl(&d, &mut buf).unwrap();
        prop_assert_eq!(read_jsonl(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn subsampling_keeps_extremes(seed in 0u64..10_000, size in 2usize..=8) {
        let d = generate_synthetic(&SyntheticConfig { num_lists: 3, list_size: 8, seed, ..SyntheticConfig::default() }).unwrap();
        let sub = d.subsample(size, seed).unwrap();
        for (full, part) in d.lists().iter().zip(sub.lists()) {
            let r = part.responses();
            prop_assert_eq!(r.len(), size);
            prop_assert_eq!(&r[0], &full.responses()[0]);
            prop_assert_eq!(&r[size - 1], &full.responses()[7]);
            let v = part.label_values();
            prop_assert!(v.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}

#[test]
fn approx_ndcg_is_not_monotone_when_the_lower_gain_is_large() {
    // with p = σ(α·d) the surrogate is G₁·D(2 − p) + G₂·D(1 + p), whose slope
    // at p = 0 is negative once G₂/G₁ exceeds D'(2)/D'(1) ≈ 0.265
    let labels = LabelVector::new(vec![0.3, 0.2]).unwrap();
    let spec = LossSpec::new(LossKind::ApproxNdcg);
    let far = spec.value(&[-1.0, 0.0], &labels).unwrap();
    let tied = spec.value(&[0.0, 0.0], &labels).unwrap();
    assert!(tied > far);
}

#[test]
fn parameter_set_round_trips_through_leaves() {
    let p = ParameterSet::from_values("x", &[1.0, -2.0]);
    let tape = Tape::new();
    let leaves = p.leaves(&tape);
    assert_eq!(leaves.iter().map(|v| v.value()).collect::<Vec<_>>(), p.values());
}
