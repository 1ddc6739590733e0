//! Config-file loading and flag overrides.
//!
//! A config file is TOML, or JSON when the path ends in `.json`. Top-level keys
//! are the `TrainConfig` fields (with the loss under `[loss]`), plus:
//!
//! - `[synthetic]`: generator settings used when no `--data` is given
//! - `holdout_fraction`: share of lists held out for evaluation
//! - `hidden`: hidden width of a fresh feature scorer (0 for linear)
//! - `[grid]`: sweep axes, e.g. `tau = [0.1, 1.0, 10.0]`

use std::collections::BTreeMap;
use std::path::Path;

use opo_core::data::SyntheticConfig;
use opo_core::trainer::{SweepAxis, SweepGrid, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub holdout_fraction: f64,
    pub hidden: usize,
    pub grid: SweepGrid,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            synthetic: SyntheticConfig::default(),
            holdout_fraction: 0.2,
            hidden: 0,
            grid: Vec::new(),
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::usage(msg.to_string())
}

fn take<T: serde::de::DeserializeOwned>(
    map: &mut serde_json::Map<String, serde_json::Value>,
    key: &str,
) -> Result<Option<T>, CliError> {
    map.remove(key)
        .map(|v| serde_json::from_value(v).map_err(|e| usage(format!("config key {key:?}: {e}"))))
        .transpose()
}

/// Parses `axis=v1,v2,...`.
pub fn parse_axis(spec: &str) -> Result<(SweepAxis, Vec<f64>), CliError> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("grid entry {spec:?} must look like axis=v1,v2")))?;
    let axis: SweepAxis = name.trim().parse().map_err(usage)?;
    let values = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| usage(format!("grid value {v:?}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((axis, values))
}

impl Settings {
    pub fn from_text(text: &str, json: bool) -> Result<Self, CliError> {
        let value: serde_json::Value = if json {
            serde_json::from_str(text).map_err(usage)?
        } else {
            toml::from_str(text).map_err(usage)?
        };
        let serde_json::Value::Object(mut map) = value else {
            return Err(usage("config must be a table of keys"));
        };
        let mut s = Settings::default();
        if let Some(syn) = take(&mut map, "synthetic")? {
            s.synthetic = syn;
        }
        if let Some(f) = take(&mut map, "holdout_fraction")? {
            s.holdout_fraction = f;
        }
        if let Some(h) = take(&mut map, "hidden")? {
            s.hidden = h;
        }
        if let Some(grid) = take::<BTreeMap<String, Vec<f64>>>(&mut map, "grid")? {
            s.grid = grid
                .into_iter()
                .map(|(k, v)| Ok((k.parse::<SweepAxis>().map_err(usage)?, v)))
                .collect::<Result<_, CliError>>()?;
        }
        s.train = serde_json::from_value(serde_json::Value::Object(map)).map_err(usage)?;
        Ok(s)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text, path.extension().is_some_and(|e| e == "json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use opo_core::losses::LossKind;

    #[test]
    fn toml_and_json_agree() {
        let toml_text = "beta = 0.5\nhidden = 2\n[loss]\nkind = \"bpr\"\n[synthetic]\nnum_lists = 10\n[grid]\ntau = [0.1, 1]\n";
        let json_text = r#"{"beta":0.5,"hidden":2,"loss":{"kind":"bpr"},"synthetic":{"num_lists":10},"grid":{"tau":[0.1,1.0]}}"#;
        let a = Settings::from_text(toml_text, false).unwrap();
        let b = Settings::from_text(json_text, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.loss.kind, LossKind::Bpr);
        assert_eq!(a.synthetic.num_lists, 10);
        assert_eq!(a.grid, vec![(SweepAxis::Tau, vec![0.1, 1.0])]);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let e = Settings::from_text("bogus = 1", false).unwrap_err();
        assert_eq!(e.code, 1);
        assert!(Settings::from_text("[grid]\nwidth = [1]", false).is_err());
    }

    #[test]
    fn axis_parsing() {
        assert_eq!(parse_axis("list_size=2,4").unwrap(), (SweepAxis::ListSize, vec![2.0, 4.0]));
        assert!(parse_axis("tau").is_err());
        assert!(parse_axis("tau=x").is_err());
    }
}
