//! Mini-batch AdamW training over response lists, and grid sweeps.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Mode};
use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::harness::{evaluate_ndcg, win_rate};
use crate::losses::LossSpec;
use crate::scorer::{RewardScoreConfig, Scorer};

pub const FEATURE_LEARNING_RATE: f64 = 1e-2;
pub const POLICY_LEARNING_RATE: f64 = 1e-1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub beta: f64,
    /// Peak learning rate; the mode default when absent.
    pub learning_rate: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    /// Truncation for held-out NDCG; the full list when absent.
    pub eval_k: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::default(),
            beta: 0.1,
            learning_rate: None,
            epochs: 5,
            batch_size: 32,
            warmup_ratio: 0.1,
            weight_decay: 0.0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            eval_k: None,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_for(&self, mode: Mode) -> f64 {
        self.learning_rate.unwrap_or(match mode {
            Mode::Feature => FEATURE_LEARNING_RATE,
            Mode::Policy => POLICY_LEARNING_RATE,
        })
    }

    pub fn reward_config(&self) -> Result<RewardScoreConfig> {
        RewardScoreConfig::new(self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        self.reward_config()?;
        let bad = |name, value, reason| Err(Error::InvalidParameter { name, value, reason });
        if let Some(lr) = self.learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad("learning_rate", lr, "learning rate must be non-negative and finite");
            }
        }
        if self.batch_size < 1 {
            return bad("batch_size", 0.0, "batch size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio", self.warmup_ratio, "warmup ratio must lie in [0, 1]");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", self.weight_decay, "weight decay must be non-negative");
        }
        let (b1, b2) = self.adam_betas;
        for (name, b) in [("adam_beta1", b1), ("adam_beta2", b2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(name, b, "Adam betas must lie in [0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", self.adam_eps, "epsilon must be positive");
        }
        Ok(())
    }
}

/// Linear warmup to the peak followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup_steps = ((warmup_ratio * total_steps as f64).round() as usize).min(total_steps);
        Self {
            peak,
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate at 0-based `step`. The last warmup step and the first
    /// decay step are both at the peak; the final step is at zero.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps - self.warmup_steps;
        if decay <= 1 {
            return self.peak;
        }
        let t = (step - self.warmup_steps).min(decay - 1) as f64 / (decay - 1) as f64;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(len: usize, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            betas,
            eps,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let (b1, b2) = self.betas;
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            params[i] -= lr * (update + self.weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub heldout_ndcg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Lists with an all-zero-gain normalizer, left out of every batch.
    pub skipped_lists: usize,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Mean loss over `indices` and its gradient with respect to the scorer
/// parameters. Lists whose normalizer is zero are skipped.
pub fn batch_loss_and_grad(
    scorer: &Scorer,
    dataset: &Dataset,
    indices: &[usize],
    loss: &LossSpec,
    cfg: RewardScoreConfig,
    step: usize,
) -> Result<Option<(f64, Vec<f64>)>> {
    let n_params = scorer.params().len();
    let mut total = 0.0;
    let mut grad = vec![0.0; n_params];
    let mut used = 0usize;
    for &i in indices {
        let list = &dataset.lists()[i];
        let tape = Tape::new();
        let leaves = scorer.params().leaves(&tape);
        let s = scorer.score_list_vars(&tape, &leaves, list, cfg)?;
        let value = match loss.evaluate(&tape, &s, &list.labels()) {
            Err(Error::ZeroNormalizer { .. }) => continue,
            other => other?,
        };
        let non_finite = || Error::NonFiniteLoss {
            step,
            list_id: list.prompt_id().to_owned(),
        };
        if !value.value().is_finite() {
            return Err(non_finite());
        }
        let adj = tape.adjoints(value).map_err(|e| match e {
            Error::Domain { .. } => non_finite(),
            other => other,
        })?;
        total += value.value();
        for (g, leaf) in grad.iter_mut().zip(&leaves) {
            *g += adj[leaf.index()];
        }
        used += 1;
    }
    if used == 0 {
        return Ok(None);
    }
    let scale = 1.0 / used as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            list_id: dataset.lists()[indices[0]].prompt_id().to_owned(),
        });
    }
    Ok(Some((total * scale, grad)))
}

/// Trains a copy of `scorer` on `dataset`. Held-out NDCG is recorded after
/// every epoch when `heldout` is given.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    scorer: &Scorer,
    heldout: Option<&Dataset>,
) -> Result<(Scorer, TrainHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    scorer.check_dataset(dataset)?;
    if let Some(h) = heldout {
        scorer.check_dataset(h)?;
    }
    let cfg = config.reward_config()?;
    let mode = scorer.mode();
    let mut scorer = scorer.clone();

    let mut usable: Vec<usize> = Vec::with_capacity(dataset.len());
    let mut skipped = 0;
    for (i, list) in dataset.lists().iter().enumerate() {
        config.loss.validate(list.len())?;
        let k = config.loss.k_for(list.len()).min(list.len());
        let zero = crate::metrics::max_dcg_at_k_with(&list.labels(), k, config.loss.gain_mode).is_err();
        if zero && matches!(config.loss.kind, crate::losses::LossKind::Opo | crate::losses::LossKind::ApproxNdcg) {
            skipped += 1;
        } else {
            usable.push(i);
        }
    }
    if usable.is_empty() {
        return Err(Error::Empty("trainable lists"));
    }

    let steps_per_epoch = usable.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule::new(
        config.learning_rate_for(mode),
        steps_per_epoch * config.epochs,
        config.warmup_ratio,
    );
    let mut opt = AdamW::new(
        scorer.params().len(),
        config.adam_betas,
        config.adam_eps,
        config.weight_decay,
    );
    let mut rng = crate::seeded_rng(config.seed, crate::stream::SHUFFLE);
    let mut history = TrainHistory {
        skipped_lists: skipped,
        ..TrainHistory::default()
    };
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let Some((loss, grad)) = batch_loss_and_grad(&scorer, dataset, batch, &config.loss, cfg, step)? else {
                continue;
            };
            let lr = schedule.lr(step);
            scorer.params_mut().update(|p| opt.step(p, &grad, lr));
            history.steps.push(StepRecord {
                epoch,
                step,
                loss,
                grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
                learning_rate: lr,
            });
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        let heldout_ndcg = match heldout {
            Some(h) if !h.is_empty() => Some(evaluate_ndcg(&scorer.with_config(cfg), h, config.eval_k, config.loss.gain_mode)?.mean),
            _ => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / batches.max(1) as f64,
            heldout_ndcg,
        });
    }
    Ok((scorer, history))
}

/// A hyperparameter that a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Beta,
    Tau,
    Alpha,
    K,
    ListSize,
    LearningRate,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::Tau => "tau",
            SweepAxis::Alpha => "alpha",
            SweepAxis::K => "k",
            SweepAxis::ListSize => "list_size",
            SweepAxis::LearningRate => "learning_rate",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "beta" => SweepAxis::Beta,
            "tau" => SweepAxis::Tau,
            "alpha" => SweepAxis::Alpha,
            "k" => SweepAxis::K,
            "list_size" | "list-size" => SweepAxis::ListSize,
            "learning_rate" | "lr" => SweepAxis::LearningRate,
            other => return Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        })
    }
}

/// Axes and their values, expanded as a Cartesian product in the given order
/// with the last axis varying fastest.
pub type SweepGrid = Vec<(SweepAxis, Vec<f64>)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub params: Vec<(SweepAxis, f64)>,
    pub heldout_ndcg: Option<f64>,
    pub win_rate: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

fn as_count(axis: SweepAxis, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{axis} must be a positive integer, got {v}")))
    }
}

fn run_cell(
    point: &[(SweepAxis, f64)],
    base: &TrainConfig,
    train_set: &Dataset,
    heldout: &Dataset,
    init: &Scorer,
) -> Result<(f64, f64, Option<f64>)> {
    let mut cfg = base.clone();
    let (mut train_set, mut heldout) = (train_set.clone(), heldout.clone());
    for &(axis, v) in point {
        match axis {
            SweepAxis::Beta => cfg.beta = v,
            SweepAxis::Tau => cfg.loss.tau = v,
            SweepAxis::Alpha => cfg.loss.alpha = v,
            SweepAxis::K => cfg.loss.k = Some(as_count(axis, v)?),
            SweepAxis::LearningRate => cfg.learning_rate = Some(v),
            SweepAxis::ListSize => {
                let size = as_count(axis, v)?;
                train_set = train_set.subsample(size, base.seed)?;
                heldout = heldout.subsample(size, base.seed.wrapping_add(1 << 32))?;
            }
        }
    }
    if let (Some(k), Some(first)) = (cfg.loss.k, train_set.lists().first()) {
        if k > first.len() {
            return Err(Error::OutOfRange {
                what: "k",
                value: k,
                min: 1,
                max: first.len(),
            });
        }
    }
    let (trained, history) = train(&cfg, &train_set, init, None)?;
    let rc = cfg.reward_config()?;
    let ndcg = evaluate_ndcg(&trained.with_config(rc), &heldout, cfg.eval_k, cfg.loss.gain_mode)?.mean;
    let wr = win_rate(&trained.with_config(rc), &init.with_config(rc), &heldout)?;
    Ok((ndcg, wr, history.final_loss()))
}

/// One train-and-evaluate run per grid point, each starting from `init`.
/// Failing cells are reported in their row and do not stop the sweep.
pub fn sweep(
    grid: &SweepGrid,
    base: &TrainConfig,
    train_set: &Dataset,
    heldout: &Dataset,
    init: &Scorer,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || grid.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::Config("sweep grid must have at least one value per axis".to_owned()));
    }
    let mut points: Vec<Vec<(SweepAxis, f64)>> = vec![Vec::new()];
    for (axis, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push((*axis, v));
                    q
                })
            })
            .collect();
    }
    Ok(points
        .into_iter()
        .map(|params| match run_cell(&params, base, train_set, heldout, init) {
            Ok((ndcg, wr, loss)) => SweepRow {
                params,
                heldout_ndcg: Some(ndcg),
                win_rate: Some(wr),
                final_loss: loss,
                error: None,
            },
            Err(e) => SweepRow {
                params,
                heldout_ndcg: None,
                win_rate: None,
                final_loss: None,
                error: Some(e.to_string()),
            },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Payload, Prompt, ResponseList, ResponseRecord, SyntheticConfig};
    use crate::losses::LossKind;
    use crate::scorer::FeatureScorer;

    fn pair_dataset() -> Dataset {
        let rec = |id: &str, x: f64, label| ResponseRecord {
            id: id.to_owned(),
            payload: Payload::Features(vec![x, 1.0]),
            label,
            oracle_utility: Some(label),
        };
        let list = ResponseList::new("p0", Prompt::Text(String::new()), vec![rec("a", 1.0, 1.0), rec("b", -1.0, 0.0)]).unwrap();
        Dataset::new(vec![list]).unwrap()
    }

    fn small_synthetic(n: usize, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            num_lists: n,
            list_size: 4,
            feature_dim: 4,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule::new(1.0, 100, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr(0) - 0.1).abs() < 1e-15);
        assert_eq!(s.lr(9), 1.0);
        assert_eq!(s.lr(10), 1.0);
        assert!(s.lr(99) <= 1e-2);
        assert!((1..100).all(|t| t < 10 || s.lr(t) <= s.lr(t - 1)));
        let no_warmup = CosineSchedule::new(0.5, 4, 0.0);
        assert_eq!(no_warmup.lr(0), 0.5);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = [1.0, -2.0];
        let mut opt = AdamW::new(2, (0.9, 0.999), 1e-8, 0.0);
        opt.step(&mut p, &[3.0, -0.5], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 1.9).abs() < 1e-7);
        let mut q = [2.0];
        let mut decay = AdamW::new(1, (0.9, 0.999), 1e-8, 0.5);
        decay.step(&mut q, &[0.0], 0.1);
        assert!((q[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = small_synthetic(10, 1);
        let init = Scorer::for_dataset(&data, 0, 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: Some(0.0),
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (trained, hist) = train(&cfg, &data, &init, None).unwrap();
        assert_eq!(trained.params().values(), init.params().values());
        assert_eq!(hist.steps.len(), 6);
        assert_eq!(hist.epochs.len(), 2);
    }

    #[test]
    fn single_pair_margin_grows_and_loss_falls() {
        let data = pair_dataset();
        let init = Scorer::Feature(FeatureScorer::zeros(2, 0).unwrap());
        let cfg = TrainConfig {
            loss: LossSpec::new(LossKind::SinglePair),
            beta: 1.0,
            learning_rate: Some(0.05),
            epochs: 200,
            batch_size: 1,
            warmup_ratio: 0.0,
            ..TrainConfig::default()
        };
        let (trained, hist) = train(&cfg, &data, &init, None).unwrap();
        let losses: Vec<f64> = hist.steps.iter().map(|s| s.loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "loss not decreasing");
        let rc = RewardScoreConfig::new(1.0).unwrap();
        let s = trained.score_list(&data.lists()[0], rc).unwrap();
        assert!(s[0] - s[1] > 0.0);
        assert!(*losses.last().unwrap() < 0.1, "{}", losses.last().unwrap());
    }

    #[test]
    fn training_is_deterministic_and_records_heldout() {
        let data = small_synthetic(40, 2);
        let (tr, ho) = data.split_at(30);
        let init = Scorer::for_dataset(&tr, 0, 7).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train(&cfg, &tr, &init, Some(&ho)).unwrap();
        let b = train(&cfg, &tr, &init, Some(&ho)).unwrap();
        assert_eq!(a, b);
        assert!(a.1.epochs.iter().all(|e| e.heldout_ndcg.is_some()));
        assert_eq!(a.1.steps.len(), 2 * 4);
    }

    #[test]
    fn reference_stays_frozen() {
        let data = generate_synthetic(&SyntheticConfig {
            num_lists: 12,
            list_size: 4,
            mode: Mode::Policy,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let init = Scorer::for_dataset(&data, 0, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&cfg, &data, &init, None).unwrap();
        let (Scorer::Policy(before), Scorer::Policy(after)) = (&init, &trained) else {
            panic!("expected policy scorers");
        };
        assert_eq!(before.reference(), after.reference());
        assert_ne!(before.policy(), after.policy());
    }

    #[test]
    fn empty_dataset_and_mismatch() {
        let init = Scorer::Feature(FeatureScorer::zeros(2, 0).unwrap());
        assert!(train(&TrainConfig::default(), &Dataset::default(), &init, None).is_err());
        let wrong = Scorer::Feature(FeatureScorer::zeros(3, 0).unwrap());
        assert!(train(&TrainConfig::default(), &pair_dataset(), &wrong, None).is_err());
    }

    #[test]
    fn sweep_cardinality_and_failures() {
        let data = small_synthetic(24, 3);
        let (tr, ho) = data.split_at(16);
        let init = Scorer::for_dataset(&tr, 0, 1).unwrap();
        let base = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let rows = sweep(&vec![(SweepAxis::Tau, vec![0.1, 1.0, 10.0])], &base, &tr, &ho, &init).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.error.is_none()));

        let rows = sweep(&vec![(SweepAxis::ListSize, vec![2.0, 3.0, 4.0, 6.0])], &base, &tr, &ho, &init).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[..3].iter().all(|r| r.error.is_none()));
        assert!(rows[3].error.is_some());

        assert!(sweep(&Vec::new(), &base, &tr, &ho, &init).is_err());
        let two = sweep(
            &vec![(SweepAxis::Beta, vec![0.1, 0.5]), (SweepAxis::Tau, vec![1.0, 2.0])],
            &base,
            &tr,
            &ho,
            &init,
        )
        .unwrap();
        assert_eq!(two.len(), 4);
        assert_eq!(two[1].params, vec![(SweepAxis::Beta, 0.1), (SweepAxis::Tau, 2.0)]);
    }

    #[test]
    fn config_from_toml() {
        let cfg: TrainConfig = toml::from_str(
            "beta = 0.5\nepochs = 2\nlearning_rate = 0.003\n[loss]\nkind = \"lambda_rank\"\nk = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.loss.kind, LossKind::LambdaRank);
        assert_eq!(cfg.loss.k, Some(4));
        assert_eq!(cfg.batch_size, 32);
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }
}
