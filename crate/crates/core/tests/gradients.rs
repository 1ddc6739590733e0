use opo_core::data::{Payload, Prompt, ResponseList, ResponseRecord};
use opo_core::diff::{check_gradient, evaluate_with_gradient, ParameterSet, DEFAULT_FD_STEP};
use opo_core::losses::{LossKind, LossSpec};
use opo_core::scorer::{FeatureScorer, PolicyScorer, RewardScoreConfig, Scorer, ToyPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn feature_list(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> ResponseList {
    let responses = (0..k)
        .map(|j| ResponseRecord {
            id: format!("r{j}"),
            payload: Payload::Features((0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()),
            label: rng.random_range(0.0..1.0),
            oracle_utility: None,
        })
        .collect();
    ResponseList::new("p", Prompt::Text(String::new()), responses).unwrap()
}

fn token_list(rng: &mut ChaCha8Rng, k: usize, vocab: u32, max_len: usize) -> ResponseList {
    let responses = (0..k)
        .map(|j| ResponseRecord {
            id: format!("r{j}"),
            payload: Payload::Tokens((0..rng.random_range(1..=max_len)).map(|_| rng.random_range(0..vocab)).collect()),
            label: rng.random_range(0.0..1.0),
            oracle_utility: None,
        })
        .collect();
    ResponseList::new("p", Prompt::Tokens(vec![rng.random_range(0..vocab)]), responses).unwrap()
}

fn check(scorer: &Scorer, list: &ResponseList, spec: &LossSpec, beta: f64) -> f64 {
    let cfg = RewardScoreConfig::new(beta).unwrap();
    let labels = list.labels();
    let result = check_gradient(
        |t, p| {
            let s = scorer.score_list_vars(t, p, list, cfg)?;
            spec.evaluate(t, &s, &labels)
        },
        scorer.params(),
        DEFAULT_FD_STEP,
    )
    .unwrap();
    result.max_relative_error
}

#[test]
fn every_loss_in_feature_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in LossKind::ALL {
        for k in [2, 4, 8] {
            for trial in 0..5 {
                let list = feature_list(&mut rng, k, 3);
                let scorer = Scorer::Feature(FeatureScorer::random(3, trial % 2 * 4, trial as u64).unwrap());
                let err = check(&scorer, &list, &LossSpec::new(kind), 1.0);
                assert!(err <= 1e-4, "{kind} K={k} trial {trial}: {err}");
            }
        }
    }
}

#[test]
fn every_loss_in_policy_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for kind in LossKind::ALL {
        for k in [2, 4, 8] {
            for trial in 0..3 {
                let list = token_list(&mut rng, k, 5, 4);
                let policy = ToyPolicy::random(5, 4, 1.0, trial).unwrap();
                let reference = ToyPolicy::random(5, 4, 1.0, 100 + trial).unwrap();
                let scorer = Scorer::Policy(PolicyScorer::with_reference(policy, reference).unwrap());
                let err = check(&scorer, &list, &LossSpec::new(kind), 0.5);
                assert!(err <= 1e-4, "{kind} K={k} trial {trial}: {err}");
            }
        }
    }
}

#[test]
fn gradients_are_deterministic_and_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let list = feature_list(&mut rng, 6, 4);
    let labels = list.labels();
    let scorer = Scorer::Feature(FeatureScorer::random(4, 0, 9).unwrap());
    let cfg = RewardScoreConfig::new(1.0).unwrap();
    for kind in LossKind::ALL {
        let spec = LossSpec::new(kind);
        let run = |scale: f64| {
            evaluate_with_gradient(
                |t, p| Ok(spec.evaluate(t, &scorer.score_list_vars(t, p, &list, cfg)?, &labels)? * scale),
                scorer.params(),
            )
            .unwrap()
        };
        let a = run(1.0);
        assert_eq!(a, run(1.0), "{kind} not deterministic");
        let b = run(3.0);
        for (x, y) in a.gradient.iter().zip(&b.gradient) {
            assert!((3.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0), "{kind}");
        }
    }
}

#[test]
fn loss_gradients_with_respect_to_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in LossKind::ALL {
        let list = feature_list(&mut rng, 5, 1);
        let labels = list.labels();
        let scores: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let spec = LossSpec::new(kind).with_tau(0.5);
        let params = ParameterSet::from_values("s", &scores);
        let result = check_gradient(|t, p| spec.evaluate(t, p, &labels), &params, DEFAULT_FD_STEP).unwrap();
        assert!(result.passes(1e-5), "{kind}: {result:?}");
    }
}
