//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected. Lists are
//! comma separated. Precedence, lowest first: built-in defaults, config file,
//! `RET_SEED`, explicit overrides.

use std::path::{Path, PathBuf};

use crate::encoder::{select_layer_indices, EncoderConfig};
use crate::error::{Error, Result};
use crate::scoring::DEFAULT_TEMPERATURE;
use crate::train::DEFAULT_LEARNING_RATE;

pub const SEED_ENV: &str = "RET_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub layers: usize,
    pub tokens: usize,
    pub width: usize,
    pub late_width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_layers: Option<Vec<usize>>,
    pub vis_layers: Option<Vec<usize>>,
    pub text_dim: Option<usize>,
    pub vis_dim: Option<usize>,
    pub gate_bias_forget: f64,
    pub gate_bias_input: f64,
    pub normalize_rows: bool,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub tau: f64,
    pub seed: u64,
    pub fixtures: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            tokens: 4,
            width: 32,
            late_width: 16,
            heads: 2,
            mlp_ratio: 4,
            text_layers: None,
            vis_layers: None,
            text_dim: None,
            vis_dim: None,
            gate_bias_forget: 0.0,
            gate_bias_input: 0.0,
            normalize_rows: false,
            lr: DEFAULT_LEARNING_RATE,
            steps: 500,
            batch_size: 8,
            tau: DEFAULT_TEMPERATURE,
            seed: 0,
            fixtures: None,
            model: None,
            index: None,
            eval: None,
            out: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "layers",
    "tokens",
    "width",
    "late_width",
    "heads",
    "mlp_ratio",
    "text_layers",
    "vis_layers",
    "text_dim",
    "vis_dim",
    "gate_bias_forget",
    "gate_bias_input",
    "normalize_rows",
    "lr",
    "steps",
    "batch_size",
    "tau",
    "seed",
    "fixtures",
    "model",
    "index",
    "eval",
    "out",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "layers" => self.layers = parse(key, value)?,
            "tokens" => self.tokens = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "late_width" => self.late_width = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "text_layers" => self.text_layers = Some(parse_list(key, value)?),
            "vis_layers" => self.vis_layers = Some(parse_list(key, value)?),
            "text_dim" => self.text_dim = Some(parse(key, value)?),
            "vis_dim" => self.vis_dim = Some(parse(key, value)?),
            "gate_bias_forget" => self.gate_bias_forget = parse(key, value)?,
            "gate_bias_input" => self.gate_bias_input = parse(key, value)?,
            "normalize_rows" => self.normalize_rows = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "fixtures" => self.fixtures = Some(value.into()),
            "model" => self.model = Some(value.into()),
            "index" => self.index = Some(value.into()),
            "eval" => self.eval = Some(value.into()),
            "out" => self.out = Some(value.into()),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// Applies `RET_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set("seed", &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be a finite value >= 0".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }

    /// Resolves the encoder architecture for backbones with the given depths
    /// and feature widths. Explicit layer lists and dims take precedence but
    /// must agree with the data.
    pub fn encoder_config(
        &self,
        text_depth: usize,
        vis_depth: usize,
        text_dim: usize,
        vis_dim: usize,
    ) -> Result<EncoderConfig> {
        for (name, set, actual) in [
            ("text_dim", self.text_dim, text_dim),
            ("vis_dim", self.vis_dim, vis_dim),
        ] {
            if let Some(v) = set {
                if v != actual {
                    return Err(Error::Config(format!(
                        "{name} = {v} but the feature files have width {actual}"
                    )));
                }
            }
        }
        let text_layers = match &self.text_layers {
            Some(l) => l.clone(),
            None => select_layer_indices(text_depth, self.layers)?,
        };
        let vis_layers = match &self.vis_layers {
            Some(l) => l.clone(),
            None => select_layer_indices(vis_depth, self.layers)?,
        };
        let cfg = EncoderConfig {
            layers: self.layers,
            tokens: self.tokens,
            width: self.width,
            late_width: self.late_width,
            heads: self.heads,
            text_layers,
            vis_layers,
            text_dim,
            vis_dim,
            mlp_ratio: self.mlp_ratio,
            gate_bias_forget: self.gate_bias_forget,
            gate_bias_input: self.gate_bias_input,
            normalize_rows: self.normalize_rows,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_text() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nlr = 0.001\nvis_layers = 0, 2, 4\n\nnormalize_rows=true\n")
            .unwrap();
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.vis_layers, Some(vec![0, 2, 4]));
        assert!(c.normalize_rows);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut c = RunConfig::default();
        let err = c.apply_text("learning_rate = 1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        assert!(c.apply_text("no equals sign").is_err());
        assert!(c.set("steps", "ten").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let mut c = RunConfig::default();
        for key in KEYS {
            let value = match *key {
                "text_layers" | "vis_layers" => "0,1",
                "normalize_rows" => "false",
                _ => "1",
            };
            c.set(key, value).unwrap();
        }
    }

    #[test]
    fn dims_must_match_data() {
        let c = RunConfig {
            text_dim: Some(7),
            ..RunConfig::default()
        };
        assert!(c.encoder_config(3, 6, 8, 8).is_err());
        let cfg = RunConfig::default().encoder_config(3, 6, 8, 9).unwrap();
        assert_eq!(cfg.vis_layers, vec![0, 2, 4]);
        assert_eq!(cfg.text_layers, vec![0, 1, 2]);
    }
}
