//! Response lists, JSONL storage and the synthetic generator.
//!
//! One JSONL line holds one prompt and its responses:
//!
//! ```json
//! {"prompt_id":"p0","prompt":"text or [token ids]","responses":[
//!   {"id":"p0-r0","features":[0.1,-2.0],"label":0.83,"oracle_utility":1.6},
//!   {"id":"p0-r1","tokens":[3,1,4],"label":0.12}]}
//! ```
//!
//! Each response carries either `features` or `tokens`. `oracle_utility` is
//! optional and only used for win-rate evaluation. Lists are re-sorted by
//! label on load, so files need not be pre-sorted.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::sigmoid;
use crate::error::{Error, Result};
use crate::metrics::LabelVector;

pub const MIN_LIST_SIZE: usize = 2;
pub const MAX_LIST_SIZE: usize = 16;

/// Whether responses are described by feature vectors or token sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Feature,
    Policy,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Feature => "feature",
            Mode::Policy => "policy",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" | "features" => Ok(Mode::Feature),
            "policy" | "tokens" => Ok(Mode::Policy),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Features(Vec<f64>),
    Tokens(Vec<u32>),
}

impl Payload {
    pub fn mode(&self) -> Mode {
        match self {
            Payload::Features(_) => Mode::Feature,
            Payload::Tokens(_) => Mode::Policy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prompt {
    Tokens(Vec<u32>),
    Text(String),
}

impl Prompt {
    /// Last prompt token, used as the first context of a toy policy.
    pub fn last_token(&self) -> Option<u32> {
        match self {
            Prompt::Tokens(t) => t.last().copied(),
            Prompt::Text(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub id: String,
    #[serde(flatten)]
    pub payload: Payload,
    pub label: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_utility: Option<f64>,
}

/// One prompt's responses, sorted by label descending (stable under ties).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResponseList {
    prompt_id: String,
    prompt: Prompt,
    responses: Vec<ResponseRecord>,
}

#[derive(Deserialize)]
struct RawList {
    prompt_id: String,
    prompt: Prompt,
    responses: Vec<ResponseRecord>,
}

impl ResponseList {
    /// Validates and pre-sorts.
    pub fn new(prompt_id: impl Into<String>, prompt: Prompt, responses: Vec<ResponseRecord>) -> Result<Self> {
        let k = responses.len();
        if !(MIN_LIST_SIZE..=MAX_LIST_SIZE).contains(&k) {
            return Err(Error::OutOfRange {
                what: "list size",
                value: k,
                min: MIN_LIST_SIZE,
                max: MAX_LIST_SIZE,
            });
        }
        for r in &responses {
            if !(0.0..=1.0).contains(&r.label) {
                return Err(Error::LabelOutOfRange { value: r.label });
            }
        }
        let mode = responses[0].payload.mode();
        if responses.iter().any(|r| r.payload.mode() != mode) {
            return Err(Error::ScorerMismatch(
                "responses mix features and tokens".to_owned(),
            ));
        }
        let list = Self {
            prompt_id: prompt_id.into(),
            prompt,
            responses,
        };
        Ok(presort_descending(list))
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn prompt(&self) -> &Prompt {
        &self.prompt
    }

    pub fn responses(&self) -> &[ResponseRecord] {
        &self.responses
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn mode(&self) -> Mode {
        self.responses[0].payload.mode()
    }

    pub fn label_values(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.label).collect()
    }

    pub fn labels(&self) -> LabelVector {
        LabelVector::new(self.label_values()).expect("response lists are kept sorted")
    }

    pub fn oracle_utilities(&self) -> Result<Vec<f64>> {
        self.responses
            .iter()
            .map(|r| r.oracle_utility.ok_or_else(|| Error::MissingOracle(r.id.clone())))
            .collect()
    }
}

/// Stable sort by label, highest first. Idempotent.
pub fn presort_descending(mut list: ResponseList) -> ResponseList {
    list.responses.sort_by(|a, b| b.label.total_cmp(&a.label));
    list
}

/// Keeps the highest- and lowest-labeled responses and `size − 2` others drawn
/// uniformly without replacement.
pub fn subsample_list(list: &ResponseList, size: usize, seed: u64) -> Result<ResponseList> {
    let k = list.len();
    if size < MIN_LIST_SIZE || size > k {
        return Err(Error::OutOfRange {
            what: "subsample size",
            value: size,
            min: MIN_LIST_SIZE,
            max: k,
        });
    }
    let mut rng = crate::seeded_rng(seed, crate::stream::SUBSAMPLE);
    let mut middle: Vec<usize> = sample(&mut rng, k - 2, size - 2)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    middle.sort_unstable();
    let keep = std::iter::once(0).chain(middle).chain(std::iter::once(k - 1));
    Ok(ResponseList {
        prompt_id: list.prompt_id.clone(),
        prompt: list.prompt.clone(),
        responses: keep.map(|i| list.responses[i].clone()).collect(),
    })
}

/// An immutable collection of lists sharing one mode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    lists: Vec<ResponseList>,
}

impl Dataset {
    pub fn new(lists: Vec<ResponseList>) -> Result<Self> {
        if let Some(first) = lists.first() {
            let mode = first.mode();
            if lists.iter().any(|l| l.mode() != mode) {
                return Err(Error::ScorerMismatch("dataset mixes feature and policy lists".to_owned()));
            }
        }
        Ok(Self { lists })
    }

    pub fn lists(&self) -> &[ResponseList] {
        &self.lists
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn mode(&self) -> Option<Mode> {
        self.lists.first().map(ResponseList::mode)
    }

    /// First `n` lists and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.lists.len());
        (
            Dataset {
                lists: self.lists[..n].to_vec(),
            },
            Dataset {
                lists: self.lists[n..].to_vec(),
            },
        )
    }

    /// Subsamples every list to `size` responses; list i uses seed `seed + i`.
    pub fn subsample(&self, size: usize, seed: u64) -> Result<Dataset> {
        let lists = self
            .lists
            .iter()
            .enumerate()
            .map(|(i, l)| subsample_list(l, size, seed.wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        Ok(Dataset { lists })
    }

    /// Feature dimension, if the dataset is in feature mode.
    pub fn feature_dim(&self) -> Option<usize> {
        match &self.lists.first()?.responses[0].payload {
            Payload::Features(x) => Some(x.len()),
            Payload::Tokens(_) => None,
        }
    }

    /// One past the largest token id in prompts and responses.
    pub fn token_bound(&self) -> u32 {
        self.lists
            .iter()
            .flat_map(|l| {
                let prompt = match &l.prompt {
                    Prompt::Tokens(t) => t.clone(),
                    Prompt::Text(_) => Vec::new(),
                };
                let responses = l.responses.iter().flat_map(|r| match &r.payload {
                    Payload::Tokens(t) => t.clone(),
                    Payload::Features(_) => Vec::new(),
                });
                prompt.into_iter().chain(responses).collect::<Vec<_>>()
            })
            .max()
            .map_or(0, |m| m + 1)
    }
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Dataset> {
    let mut lists = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawList = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let list = ResponseList::new(raw.prompt_id, raw.prompt, raw.responses).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        lists.push(list);
    }
    Dataset::new(lists)
}

pub fn write_jsonl(dataset: &Dataset, mut writer: impl Write) -> Result<()> {
    for list in &dataset.lists {
        serde_json::to_writer(&mut writer, list).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    read_jsonl(BufReader::new(File::open(path)?))
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(dataset, BufWriter::new(File::create(path)?))
}

/// Settings for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_lists: usize,
    pub list_size: usize,
    pub feature_dim: usize,
    pub label_noise_sd: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Standard deviation of the hidden utility before the sigmoid.
    pub utility_scale: f64,
    pub vocab: usize,
    pub max_len: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_lists: 1000,
            list_size: 8,
            feature_dim: 16,
            label_noise_sd: 0.05,
            mode: Mode::Feature,
            seed: 0,
            utility_scale: 2.0,
            vocab: 16,
            max_len: 8,
        }
    }
}

/// Generates lists whose labels come from a hidden utility:
/// ψ = clamp(σ(u) + N(0, noise²), 0, 1).
///
/// In feature mode u = scale · ⟨w, x⟩ for one unit direction w shared by the
/// whole dataset and x ~ N(0, I). In policy mode u is a scaled sum of a fixed
/// random bigram table over the response tokens, starting from a one-token
/// prompt.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.num_lists < 1 {
        return Err(Error::Config("num_lists must be at least 1".to_owned()));
    }
    if !(MIN_LIST_SIZE..=MAX_LIST_SIZE).contains(&cfg.list_size) {
        return Err(Error::OutOfRange {
            what: "list size",
            value: cfg.list_size,
            min: MIN_LIST_SIZE,
            max: MAX_LIST_SIZE,
        });
    }
    if !(cfg.label_noise_sd >= 0.0) {
        return Err(Error::Config("label_noise_sd must be non-negative".to_owned()));
    }
    let noise = Normal::new(0.0, cfg.label_noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = crate::seeded_rng(cfg.seed, crate::stream::SYNTHETIC);

    let lists = match cfg.mode {
        Mode::Feature => {
            if cfg.feature_dim == 0 {
                return Err(Error::Config("feature_dim must be positive".to_owned()));
            }
            let raw: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let direction: Vec<f64> = raw.iter().map(|v| v / norm).collect();
            (0..cfg.num_lists)
                .map(|i| {
                    let responses = (0..cfg.list_size)
                        .map(|j| {
                            let x: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
                            let u = cfg.utility_scale * x.iter().zip(&direction).map(|(a, b)| a * b).sum::<f64>();
                            let label = (sigmoid(u) + noise.sample(&mut rng)).clamp(0.0, 1.0);
                            ResponseRecord {
                                id: format!("p{i}-r{j}"),
                                payload: Payload::Features(x),
                                label,
                                oracle_utility: Some(u),
                            }
                        })
                        .collect();
                    ResponseList::new(format!("p{i}"), Prompt::Text(format!("synthetic prompt {i}")), responses)
                })
                .collect::<Result<Vec<_>>>()?
        }
        Mode::Policy => {
            if cfg.vocab == 0 || cfg.max_len == 0 {
                return Err(Error::Config("vocab and max_len must be positive".to_owned()));
            }
            let v = cfg.vocab;
            let table: Vec<f64> = (0..v * v).map(|_| rng.sample(StandardNormal)).collect();
            let per_token = cfg.utility_scale / (cfg.max_len as f64).sqrt();
            (0..cfg.num_lists)
                .map(|i| {
                    let prompt_token = rng.random_range(0..v as u32);
                    let responses = (0..cfg.list_size)
                        .map(|j| {
                            let len = rng.random_range(1..=cfg.max_len);
                            let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..v as u32)).collect();
                            let mut ctx = prompt_token as usize;
                            let mut u = 0.0;
                            for &t in &tokens {
                                u += per_token * table[ctx * v + t as usize];
                                ctx = t as usize;
                            }
                            let label = (sigmoid(u) + noise.sample(&mut rng)).clamp(0.0, 1.0);
                            ResponseRecord {
                                id: format!("p{i}-r{j}"),
                                payload: Payload::Tokens(tokens),
                                label,
                                oracle_utility: Some(u),
                            }
                        })
                        .collect();
                    ResponseList::new(format!("p{i}"), Prompt::Tokens(vec![prompt_token]), responses)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Dataset::new(lists)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: f64) -> ResponseRecord {
        ResponseRecord {
            id: id.to_owned(),
            payload: Payload::Features(vec![label]),
            label,
            oracle_utility: None,
        }
    }

    fn list(labels: &[f64]) -> ResponseList {
        let records = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| record(&format!("r{i}"), l))
            .collect();
        ResponseList::new("p", Prompt::Text(String::new()), records).unwrap()
    }

    fn ids(l: &ResponseList) -> Vec<&str> {
        l.responses().iter().map(|r| r.id.as_str()).collect()
    }

    #[test]
    fn presort_reorders_and_is_stable() {
        let l = list(&[0.2, 0.9]);
        assert_eq!(l.label_values(), vec![0.9, 0.2]);
        let tied = list(&[0.5, 0.5]);
        assert_eq!(ids(&tied), vec!["r0", "r1"]);
        let again = presort_descending(tied.clone());
        assert_eq!(again, tied);
    }

    #[test]
    fn list_size_bounds() {
        let one = vec![record("a", 0.5)];
        assert!(matches!(
            ResponseList::new("p", Prompt::Text(String::new()), one),
            Err(Error::OutOfRange { what: "list size", .. })
        ));
        let many = (0..17).map(|i| record(&i.to_string(), 0.5)).collect();
        assert!(ResponseList::new("p", Prompt::Text(String::new()), many).is_err());
    }

    #[test]
    fn subsample_keeps_extremes() {
        let l = list(&[0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2]);
        let two = subsample_list(&l, 2, 3).unwrap();
        assert_eq!(two.label_values(), vec![0.9, 0.2]);
        let full = subsample_list(&l, 8, 3).unwrap();
        assert_eq!(full, l);
        for seed in 0..100 {
            let s = subsample_list(&l, 4, seed).unwrap();
            let labels = s.label_values();
            assert_eq!(labels.len(), 4);
            assert_eq!(labels[0], 0.9);
            assert_eq!(labels[3], 0.2);
            assert!(labels.windows(2).all(|w| w[0] >= w[1]));
            assert_eq!(s, subsample_list(&l, 4, seed).unwrap());
        }
        assert!(subsample_list(&l, 1, 0).is_err());
        assert!(subsample_list(&l, 9, 0).is_err());
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        let d = read_jsonl("".as_bytes()).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn label_out_of_range_names_line() {
        let text = concat!(
            r#"{"prompt_id":"a","prompt":"x","responses":[{"id":"1","features":[0.0],"label":0.5},{"id":"2","features":[1.0],"label":0.1}]}"#,
            "\n",
            r#"{"prompt_id":"b","prompt":"x","responses":[{"id":"1","features":[0.0],"label":1.5},{"id":"2","features":[1.0],"label":0.1}]}"#,
        );
        match read_jsonl(text.as_bytes()) {
            Err(Error::Parse { line: 2, message }) => assert!(message.contains("1.5"), "{message}"),
            other => panic!("expected parse error on line 2, got {other:?}"),
        }
    }

    #[test]
    fn malformed_and_short_lines() {
        let bad = read_jsonl("{not json}\n".as_bytes());
        assert!(matches!(bad, Err(Error::Parse { line: 1, .. })));
        let short = r#"{"prompt_id":"a","prompt":"x","responses":[{"id":"1","features":[0.0],"label":0.5}]}"#;
        assert!(matches!(read_jsonl(short.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn loader_sorts_and_reads_tokens() {
        let text = r#"{"prompt_id":"a","prompt":[3],"responses":[{"id":"lo","tokens":[1,2],"label":0.1},{"id":"hi","tokens":[0],"label":0.7,"oracle_utility":2.5}]}"#;
        let d = read_jsonl(text.as_bytes()).unwrap();
        let l = &d.lists()[0];
        assert_eq!(ids(l), vec!["hi", "lo"]);
        assert_eq!(l.mode(), Mode::Policy);
        assert_eq!(l.prompt().last_token(), Some(3));
        assert_eq!(l.responses()[0].oracle_utility, Some(2.5));
        assert_eq!(d.token_bound(), 4);
    }

    #[test]
    fn round_trip_generated_dataset() {
        for mode in [Mode::Feature, Mode::Policy] {
            let cfg = SyntheticConfig {
                num_lists: 20,
                mode,
                ..SyntheticConfig::default()
            };
            let d = generate_synthetic(&cfg).unwrap();
            let mut buf = Vec::new();
            write_jsonl(&d, &mut buf).unwrap();
            assert_eq!(read_jsonl(buf.as_slice()).unwrap(), d);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig {
            num_lists: 10,
            ..SyntheticConfig::default()
        };
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_jsonl(&generate_synthetic(&cfg).unwrap(), &mut a).unwrap();
        write_jsonl(&generate_synthetic(&cfg).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_free_labels_follow_utility() {
        for mode in [Mode::Feature, Mode::Policy] {
            let cfg = SyntheticConfig {
                num_lists: 50,
                label_noise_sd: 0.0,
                mode,
                ..SyntheticConfig::default()
            };
            for l in generate_synthetic(&cfg).unwrap().lists() {
                let u = l.oracle_utilities().unwrap();
                assert!(u.windows(2).all(|w| w[0] >= w[1]), "{u:?}");
            }
        }
    }

    #[test]
    fn label_histogram_is_spread() {
        let cfg = SyntheticConfig {
            num_lists: 1000,
            list_size: 8,
            ..SyntheticConfig::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        let mut bins = [0usize; 10];
        for l in d.lists() {
            for v in l.label_values() {
                bins[((v * 10.0) as usize).min(9)] += 1;
            }
        }
        assert!(bins.iter().all(|&b| b > 0), "{bins:?}");
        let mut distinct: Vec<f64> = d.lists().iter().flat_map(|l| l.label_values()).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert!(distinct.len() >= 10);
    }

    #[test]
    fn invalid_synthetic_configs() {
        let zero = SyntheticConfig {
            num_lists: 0,
            ..SyntheticConfig::default()
        };
        assert!(generate_synthetic(&zero).is_err());
        let big = SyntheticConfig {
            list_size: 17,
            ..SyntheticConfig::default()
        };
        assert!(generate_synthetic(&big).is_err());
    }
}
