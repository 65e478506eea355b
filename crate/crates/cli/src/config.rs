//! Run configuration: flat `key = value` lines grouped under `[section]`
//! headers. A key `size` under `[codebook]` is addressed as `codebook.size`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

/// Every recognized key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("data.dir", ""),
    ("data.split", "0.8,0.1,0.1"),
    ("synth.n_examples", "1000"),
    ("synth.examples_per_movie", "4"),
    ("synth.dim", "32"),
    ("synth.signal_strength", "1"),
    ("synth.noise", "0.25"),
    ("synth.text_noise", "1"),
    ("synth.nuisance", "0.6"),
    ("synth.nuisance_dims", "8"),
    ("synth.step_angle_deg", "30"),
    ("synth.plane_share", "0.5"),
    ("synth.movie_correlation", "0.3"),
    ("synth.scenes", "0"),
    ("synth.scene_share", "0"),
    ("synth.words_per_step", "2,4"),
    ("codebook.variant", "vanilla"),
    ("codebook.size", "4096"),
    ("codebook.dim", "32"),
    ("codebook.beta", "0.8"),
    ("model.model_dim", "128"),
    ("model.depth", "3"),
    ("model.heads", "4"),
    ("model.max_text_tokens", "32"),
    ("model.max_frames", "20"),
    ("model.conditioning", "prefix"),
    ("model.use_vq", "true"),
    ("train.models", "orderer"),
    ("train.batch_size", "16"),
    ("train.learning_rate", "3e-4"),
    ("train.codebook_learning_rate", "1e-2"),
    ("train.weight_decay", "0.05"),
    ("train.warmup_fraction", "0.1"),
    ("train.total_steps", "1000"),
    ("train.lambda_vq", "1"),
    ("train.negatives", "other_sequences"),
    ("train.grad_clip", "1"),
    ("train.dead_code_window", "2000"),
    ("rerank.model_dim", "64"),
    ("rerank.heads", "4"),
    ("rerank.total_steps", "1000"),
    ("rerank.learning_rate", "1e-3"),
    ("head.shared_dim", "0"),
    ("head.total_steps", "500"),
    ("head.learning_rate", "1e-3"),
    ("head.batch_size", "32"),
    ("eval.protocol", "ordering"),
    ("eval.strategy", "vq-trans"),
    ("eval.split", "test"),
    ("eval.pool_size", "500"),
    ("eval.ks", "10,20,30"),
    ("eval.retrieval_ks", "1,5,10,20,30"),
    ("eval.n_segments", "0"),
    ("eval.beam_width", "5"),
    ("eval.seg_limit", "10000"),
    ("eval.use_head", "false"),
    ("sweep.grid", "codebook"),
    ("sweep.variants", "vanilla"),
    ("sweep.lambdas", "0.1,1,10"),
    ("sweep.total_steps", "200"),
    ("stats.ngrams", "1,2,3"),
    ("stats.lexicon", ""),
];

/// Fully resolved configuration: defaults overlaid by the file, then by flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

/// Every problem found while validating a configuration, reported together.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration:")?;
        for e in &self.0 {
            write!(f, "\n  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

fn is_known(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key)
}

/// Parses config text into `(key, value)` pairs, rejecting every unknown key
/// at once.
pub fn parse_config_text(text: &str) -> std::result::Result<Vec<(String, String)>, ConfigErrors> {
    let mut section = String::new();
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errors.push(format!("line {}: expected key = value, got {line:?}", i + 1));
            continue;
        };
        let k = k.trim();
        let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        if !is_known(&key) {
            errors.push(format!("line {}: unknown key {key}", i + 1));
            continue;
        }
        out.push((key, v.trim().to_string()));
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(ConfigErrors(errors))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional file, then `overrides` (`key=value`).
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (k, v) in parse_config_text(&text)? {
                cfg.values.insert(k, v);
            }
        }
        cfg.apply(overrides)?;
        Ok(cfg)
    }

    /// Applies overrides, rejecting every unknown key at once.
    pub fn apply(&mut self, overrides: &[(String, String)]) -> Result<()> {
        let unknown: Vec<String> = overrides
            .iter()
            .filter(|(k, _)| !is_known(k))
            .map(|(k, _)| format!("unknown key {k}"))
            .collect();
        if !unknown.is_empty() {
            return Err(ConfigErrors(unknown).into());
        }
        for (k, v) in overrides {
            self.values.insert(k.clone(), v.clone());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        self.apply(&[(key.to_string(), value.to_string())])
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered config key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e| anyhow::anyhow!("{key} = {v:?}: {e}"))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(key);
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|x| x.trim().parse().map_err(|e| anyhow::anyhow!("{key} = {v:?}: {e}")))
            .collect()
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => bail!("{key} = {v:?}: expected true or false"),
        }
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Renders in the same format the parser reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (k, v) in &self.values {
            let (section, name) = k.split_once('.').expect("keys are sectioned");
            if section != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{name} = {v}\n"));
        }
        out
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}
