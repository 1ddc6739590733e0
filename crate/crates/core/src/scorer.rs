//! Score producers: a feature scorer and a bigram toy policy.
//!
//! In policy mode the score of a response y is β · (log π_θ(y) − log π_ref(y))
//! where π_ref is a frozen copy of the policy. In feature mode it is β · f(x).

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::data::{Dataset, Mode, Payload, ResponseList};
use crate::diff::{evaluate_with_gradient, DiffValue, ParameterSet, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_VOCAB: usize = 16;
pub const DEFAULT_MAX_LEN: usize = 8;

const CHECKPOINT_HEADER: &str = "opo-scorer v1";

/// Linear map, or one tanh hidden layer of width `hidden` followed by a
/// linear read-out. Neither layer has an output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScorer {
    params: ParameterSet,
    input_dim: usize,
    hidden: usize,
}

impl FeatureScorer {
    pub fn linear(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("weights"));
        }
        Ok(Self {
            params: ParameterSet::from_values("w.", weights),
            input_dim: weights.len(),
            hidden: 0,
        })
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Result<Self> {
        Self::build(input_dim, hidden, |_| 0.0)
    }

    /// Every weight uniform in ±1/√fan_in.
    pub fn random(input_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = crate::seeded_rng(seed, crate::stream::FEATURE_INIT);
        Self::build(input_dim, hidden, |fan_in| {
            let b = 1.0 / (fan_in as f64).sqrt();
            rng.random_range(-b..=b)
        })
    }

    fn build(input_dim: usize, hidden: usize, mut init: impl FnMut(usize) -> f64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Empty("features"));
        }
        let mut params = ParameterSet::new();
        if hidden == 0 {
            for c in 0..input_dim {
                params.insert(format!("w.{c}"), init(input_dim))?;
            }
        } else {
            for r in 0..hidden {
                for c in 0..input_dim {
                    params.insert(format!("hidden.w.{r}.{c}"), init(input_dim))?;
                }
            }
            for r in 0..hidden {
                params.insert(format!("hidden.b.{r}"), init(input_dim))?;
            }
            for r in 0..hidden {
                params.insert(format!("out.w.{r}"), init(hidden))?;
            }
        }
        Ok(Self {
            params,
            input_dim,
            hidden,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// f(x) recorded on a tape, with `p` the leaves of [`Self::params`].
    pub fn score_vars<'t>(&self, tape: &'t Tape, p: &[Var<'t>], x: &[f64]) -> Result<Var<'t>> {
        self.check_dim(x)?;
        let d = self.input_dim;
        if self.hidden == 0 {
            return Ok(tape.dot_const(p, x));
        }
        let h = self.hidden;
        let biases = &p[h * d..h * d + h];
        let out = &p[h * d + h..];
        let acts: Vec<Var<'t>> = (0..h)
            .map(|r| (tape.dot_const(&p[r * d..(r + 1) * d], x) + biases[r]).tanh())
            .collect();
        Ok(tape.dot(out, &acts))
    }

    /// f(x) in plain arithmetic.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let p = self.params.values();
        let d = self.input_dim;
        if self.hidden == 0 {
            return Ok(p.iter().zip(x).map(|(w, v)| w * v).sum());
        }
        let h = self.hidden;
        Ok((0..h)
            .map(|r| {
                let pre: f64 = p[r * d..(r + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + p[h * d + r];
                p[h * d + h + r] * pre.tanh()
            })
            .sum())
    }
}

pub fn score_features(scorer: &FeatureScorer, features: &[f64]) -> Result<DiffValue> {
    scorer.check_dim(features)?;
    evaluate_with_gradient(|t, p| scorer.score_vars(t, p, features), &scorer.params)
}

/// Bigram next-token logits. Row `c < vocab` is the distribution after token
/// c; row `vocab` is the distribution at the start of a response when there
/// is no prompt token.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    logits: ParameterSet,
    vocab: usize,
    max_len: usize,
}

impl ToyPolicy {
    pub fn uniform(vocab: usize, max_len: usize) -> Result<Self> {
        Self::from_logits(vocab, max_len, &vec![0.0; (vocab + 1) * vocab])
    }

    /// Logits uniform in ±scale.
    pub fn random(vocab: usize, max_len: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = crate::seeded_rng(seed, crate::stream::POLICY_INIT);
        let logits: Vec<f64> = (0..(vocab + 1) * vocab).map(|_| rng.random_range(-scale..=scale)).collect();
        Self::from_logits(vocab, max_len, &logits)
    }

    /// Row-major `(vocab + 1) × vocab` logits.
    pub fn from_logits(vocab: usize, max_len: usize, logits: &[f64]) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::Empty("vocabulary"));
        }
        if logits.len() != (vocab + 1) * vocab {
            return Err(Error::DimensionMismatch {
                expected: (vocab + 1) * vocab,
                found: logits.len(),
            });
        }
        let mut params = ParameterSet::new();
        for ctx in 0..=vocab {
            for tok in 0..vocab {
                params.insert(logit_name(ctx, tok, vocab), logits[ctx * vocab + tok])?;
            }
        }
        Ok(Self {
            logits: params,
            vocab,
            max_len,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn params(&self) -> &ParameterSet {
        &self.logits
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.logits
    }

    fn check(&self, context: Option<u32>, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max_len: self.max_len,
            });
        }
        for &t in context.iter().chain(tokens) {
            if t as usize >= self.vocab {
                return Err(Error::OutOfVocabulary {
                    token: t,
                    vocab: self.vocab,
                });
            }
        }
        Ok(())
    }

    fn row(&self, context: Option<u32>) -> usize {
        context.map_or(self.vocab, |c| c as usize)
    }

    /// Σ_t log softmax(logits[ctx_t])[y_t] on a tape.
    pub fn log_prob_vars<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        context: Option<u32>,
        tokens: &[u32],
    ) -> Result<Var<'t>> {
        self.check(context, tokens)?;
        let v = self.vocab;
        let mut ctx = context;
        let mut terms = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let row = &p[self.row(ctx) * v..(self.row(ctx) + 1) * v];
            terms.push(row[tok as usize] - tape.log_sum_exp(row));
            ctx = Some(tok);
        }
        Ok(tape.sum(&terms))
    }

    /// Same quantity in plain arithmetic.
    pub fn log_prob(&self, context: Option<u32>, tokens: &[u32]) -> Result<f64> {
        self.check(context, tokens)?;
        let v = self.vocab;
        let p = self.logits.values();
        let mut ctx = context;
        let mut total = 0.0;
        for &tok in tokens {
            let row = &p[self.row(ctx) * v..(self.row(ctx) + 1) * v];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += row[tok as usize] - lse;
            ctx = Some(tok);
        }
        Ok(total)
    }

    /// Next-token distribution after `context`.
    pub fn next_token_probs(&self, context: Option<u32>) -> Result<Vec<f64>> {
        self.check(context, &[])?;
        let v = self.vocab;
        let row = &self.logits.values()[self.row(context) * v..(self.row(context) + 1) * v];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        Ok(e.into_iter().map(|x| x / z).collect())
    }
}

fn logit_name(ctx: usize, tok: usize, vocab: usize) -> String {
    if ctx == vocab {
        format!("logit.bos.{tok}")
    } else {
        format!("logit.{ctx}.{tok}")
    }
}

/// log π(y) from the start-of-response context.
pub fn sequence_log_prob(policy: &ToyPolicy, tokens: &[u32]) -> Result<DiffValue> {
    policy.check(None, tokens)?;
    evaluate_with_gradient(|t, p| policy.log_prob_vars(t, p, None, tokens), &policy.logits)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardScoreConfig {
    beta: f64,
}

impl RewardScoreConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "beta",
                value: beta,
                reason: "beta must be positive and finite",
            });
        }
        Ok(Self { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

fn check_same_vocab(policy: &ToyPolicy, reference: &ToyPolicy) -> Result<()> {
    if policy.vocab != reference.vocab {
        return Err(Error::ScorerMismatch(format!(
            "policy vocabulary {} differs from reference vocabulary {}",
            policy.vocab, reference.vocab
        )));
    }
    Ok(())
}

/// β · (log π(y) − log π_ref(y)); the gradient is with respect to the policy
/// logits only.
pub fn reward_score(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    tokens: &[u32],
    cfg: RewardScoreConfig,
) -> Result<DiffValue> {
    check_same_vocab(policy, reference)?;
    let ref_lp = reference.log_prob(None, tokens)?;
    evaluate_with_gradient(
        |t, p| Ok(cfg.beta * (policy.log_prob_vars(t, p, None, tokens)? - ref_lp)),
        &policy.logits,
    )
}

/// A trainable policy together with its frozen reference.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyScorer {
    policy: ToyPolicy,
    reference: ToyPolicy,
}

impl PolicyScorer {
    /// The reference is a deep copy of `policy`.
    pub fn new(policy: ToyPolicy) -> Self {
        Self {
            reference: policy.clone(),
            policy,
        }
    }

    pub fn with_reference(policy: ToyPolicy, reference: ToyPolicy) -> Result<Self> {
        check_same_vocab(&policy, &reference)?;
        if policy.max_len != reference.max_len {
            return Err(Error::ScorerMismatch("policy and reference max_len differ".to_owned()));
        }
        Ok(Self { policy, reference })
    }

    pub fn policy(&self) -> &ToyPolicy {
        &self.policy
    }

    pub fn reference(&self) -> &ToyPolicy {
        &self.reference
    }
}

/// Anything that can score a whole list.
pub trait ListScorer {
    fn score_list(&self, list: &ResponseList) -> Result<Vec<f64>>;
}

impl<F> ListScorer for F
where
    F: Fn(&ResponseList) -> Result<Vec<f64>>,
{
    fn score_list(&self, list: &ResponseList) -> Result<Vec<f64>> {
        self(list)
    }
}

/// A scorer paired with its reward configuration.
#[derive(Debug, Clone, Copy)]
pub struct Configured<'a> {
    pub scorer: &'a Scorer,
    pub cfg: RewardScoreConfig,
}

impl ListScorer for Configured<'_> {
    fn score_list(&self, list: &ResponseList) -> Result<Vec<f64>> {
        self.scorer.score_list(list, self.cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    Feature(FeatureScorer),
    Policy(PolicyScorer),
}

impl Scorer {
    /// A seeded scorer shaped for `dataset`: a random linear (or one-hidden-
    /// layer) feature scorer, or a uniform policy covering its tokens.
    pub fn for_dataset(dataset: &Dataset, hidden: usize, seed: u64) -> Result<Self> {
        match dataset.mode() {
            None => Err(Error::Empty("dataset")),
            Some(Mode::Feature) => {
                let dim = dataset.feature_dim().expect("feature datasets have a dimension");
                Ok(Scorer::Feature(FeatureScorer::random(dim, hidden, seed)?))
            }
            Some(Mode::Policy) => {
                let vocab = (dataset.token_bound() as usize).max(DEFAULT_VOCAB);
                let max_len = dataset
                    .lists()
                    .iter()
                    .flat_map(|l| l.responses())
                    .map(|r| match &r.payload {
                        Payload::Tokens(t) => t.len(),
                        Payload::Features(_) => 0,
                    })
                    .max()
                    .unwrap_or(0)
                    .max(DEFAULT_MAX_LEN);
                Ok(Scorer::Policy(PolicyScorer::new(ToyPolicy::uniform(vocab, max_len)?)))
            }
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            Scorer::Feature(_) => Mode::Feature,
            Scorer::Policy(_) => Mode::Policy,
        }
    }

    /// The trainable parameters.
    pub fn params(&self) -> &ParameterSet {
        match self {
            Scorer::Feature(f) => &f.params,
            Scorer::Policy(p) => &p.policy.logits,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        match self {
            Scorer::Feature(f) => &mut f.params,
            Scorer::Policy(p) => &mut p.policy.logits,
        }
    }

    /// Errors if the list's payload cannot be scored by this scorer.
    pub fn check_list(&self, list: &ResponseList) -> Result<()> {
        for r in list.responses() {
            match (self, &r.payload) {
                (Scorer::Feature(f), Payload::Features(x)) => f.check_dim(x)?,
                (Scorer::Policy(p), Payload::Tokens(t)) => {
                    p.policy.check(list.prompt().last_token(), t)?
                }
                _ => {
                    return Err(Error::ScorerMismatch(format!(
                        "{} scorer cannot score {} list {:?}",
                        self.mode(),
                        list.mode(),
                        list.prompt_id()
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        dataset.lists().iter().try_for_each(|l| self.check_list(l))
    }

    /// Scores of every response on a tape, with `p` the leaves of
    /// [`Self::params`].
    pub fn score_list_vars<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        list: &ResponseList,
        cfg: RewardScoreConfig,
    ) -> Result<Vec<Var<'t>>> {
        self.check_list(list)?;
        let ctx = list.prompt().last_token();
        list.responses()
            .iter()
            .map(|r| match (self, &r.payload) {
                (Scorer::Feature(f), Payload::Features(x)) => Ok(cfg.beta * f.score_vars(tape, p, x)?),
                (Scorer::Policy(s), Payload::Tokens(t)) => {
                    let ref_lp = s.reference.log_prob(ctx, t)?;
                    Ok(cfg.beta * (s.policy.log_prob_vars(tape, p, ctx, t)? - ref_lp))
                }
                _ => unreachable!("checked above"),
            })
            .collect()
    }

    /// Plain scores of every response.
    pub fn score_list(&self, list: &ResponseList, cfg: RewardScoreConfig) -> Result<Vec<f64>> {
        self.check_list(list)?;
        let ctx = list.prompt().last_token();
        list.responses()
            .iter()
            .map(|r| match (self, &r.payload) {
                (Scorer::Feature(f), Payload::Features(x)) => Ok(cfg.beta * f.score(x)?),
                (Scorer::Policy(s), Payload::Tokens(t)) => {
                    Ok(cfg.beta * (s.policy.log_prob(ctx, t)? - s.reference.log_prob(ctx, t)?))
                }
                _ => unreachable!("checked above"),
            })
            .collect()
    }

    /// Borrows the scorer with a fixed β as a [`ListScorer`].
    pub fn with_config(&self, cfg: RewardScoreConfig) -> Configured<'_> {
        Configured { scorer: self, cfg }
    }

    /// Flat `key = value` text with a version header. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_HEADER}").unwrap();
        match self {
            Scorer::Feature(f) => {
                writeln!(out, "kind = feature").unwrap();
                writeln!(out, "input_dim = {}", f.input_dim).unwrap();
                writeln!(out, "hidden = {}", f.hidden).unwrap();
                for (name, v) in f.params.iter() {
                    writeln!(out, "{name} = {v:?}").unwrap();
                }
            }
            Scorer::Policy(p) => {
                writeln!(out, "kind = policy").unwrap();
                writeln!(out, "vocab = {}", p.policy.vocab).unwrap();
                writeln!(out, "max_len = {}", p.policy.max_len).unwrap();
                for (prefix, pol) in [("policy", &p.policy), ("reference", &p.reference)] {
                    for (name, v) in pol.logits.iter() {
                        writeln!(out, "{prefix}.{name} = {v:?}").unwrap();
                    }
                }
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == CHECKPOINT_HEADER => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "expected header {CHECKPOINT_HEADER:?}, found {:?}",
                    other.map(|(_, l)| l)
                )))
            }
        }
        let mut entries: Vec<(String, String)> = Vec::new();
        for (i, line) in lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("line {}: expected `key = value`", i + 1)))?;
            let key = k.trim().to_owned();
            if entries.iter().any(|(e, _)| *e == key) {
                return Err(Error::Checkpoint(format!("line {}: duplicate key {key:?}", i + 1)));
            }
            entries.push((key, v.trim().to_owned()));
        }
        let get = |key: &str| -> Result<&str> {
            entries
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing key {key:?}")))
        };
        let int = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
        };
        let mut used = 0;
        let mut fill = |params: &mut ParameterSet, prefix: &str| -> Result<()> {
            let names: Vec<String> = params.iter().map(|(n, _)| n.to_owned()).collect();
            let values = names
                .iter()
                .map(|n| {
                    let key = format!("{prefix}{n}");
                    get(&key)?
                        .parse::<f64>()
                        .map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            used += values.len();
            params.update(|p| p.copy_from_slice(&values));
            Ok(())
        };
        let (scorer, meta) = match get("kind")? {
            "feature" => {
                let mut f = FeatureScorer::zeros(int("input_dim")?, int("hidden")?)?;
                fill(&mut f.params, "")?;
                (Scorer::Feature(f), 3)
            }
            "policy" => {
                let (vocab, max_len) = (int("vocab")?, int("max_len")?);
                let mut policy = ToyPolicy::uniform(vocab, max_len)?;
                let mut reference = policy.clone();
                fill(&mut policy.logits, "policy.")?;
                fill(&mut reference.logits, "reference.")?;
                (Scorer::Policy(PolicyScorer { policy, reference }), 3)
            }
            other => return Err(Error::Checkpoint(format!("unknown scorer kind {other:?}"))),
        };
        if entries.len() != used + meta {
            return Err(Error::Checkpoint(format!(
                "{} unrecognized keys",
                entries.len() - used - meta
            )));
        }
        Ok(scorer)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}
