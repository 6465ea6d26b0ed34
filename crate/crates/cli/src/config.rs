//! Run configuration: one JSON document per run, validated against the
//! schema below before any work starts. Unknown keys are rejected and every
//! violation is reported, not just the first. Individual keys can be
//! overridden from the command line with `--set path=value`.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use longenc_core::bench::{ExecutionMode, WorkloadSpec};
use longenc_core::encoder::ModelConfig;
use longenc_core::finetune::TaskSpec;
use longenc_core::pretrain::PhaseSpec;

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub global_seed: u64,
    pub output_dir: String,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    #[serde(default)]
    pub phases: Vec<PhaseSpec>,
    #[serde(default)]
    pub tasks: Vec<TaskSection>,
    #[serde(default)]
    pub bench: Option<BenchSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub corpus_files: Vec<String>,
    pub target_size: usize,
    pub vocab_file: String,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.1
}

/// Preset name plus optional per-field overrides.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    #[serde(default)]
    pub n_layers: Option<usize>,
    #[serde(default)]
    pub d_model: Option<usize>,
    #[serde(default)]
    pub n_heads: Option<usize>,
    #[serde(default)]
    pub d_ff: Option<usize>,
    #[serde(default)]
    pub max_seq_len: Option<usize>,
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub global_period: Option<usize>,
    #[serde(default)]
    pub rope_theta_global: Option<f64>,
    #[serde(default)]
    pub rope_theta_local: Option<f64>,
    #[serde(default)]
    pub dropout: Option<f64>,
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize) -> Result<ModelConfig, CliError> {
        let mut config = ModelConfig::preset(&self.preset, vocab_size).ok_or_else(|| {
            CliError::Config(format!(
                "unknown model preset {:?} (available: tiny, small)",
                self.preset
            ))
        })?;
        if let Some(v) = self.n_layers {
            config.n_layers = v;
        }
        if let Some(v) = self.d_model {
            config.d_model = v;
        }
        if let Some(v) = self.n_heads {
            config.n_heads = v;
        }
        if let Some(v) = self.d_ff {
            config.d_ff = v;
        }
        if let Some(v) = self.max_seq_len {
            config.max_seq_len = v;
        }
        if let Some(v) = self.window {
            config.window = v;
        }
        if let Some(v) = self.global_period {
            config.global_period = v;
        }
        if let Some(v) = self.rope_theta_global {
            config.rope_theta_global = v;
        }
        if let Some(v) = self.rope_theta_local {
            config.rope_theta_local = v;
        }
        if let Some(v) = self.dropout {
            config.dropout = v;
        }
        config
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub spec: TaskSpec,
    pub dataset: DatasetPaths,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub train: String,
    pub val: String,
    pub test: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub workloads: Vec<WorkloadSpec>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_modes")]
    pub modes: Vec<ExecutionMode>,
    #[serde(default = "default_capacity")]
    pub batch_capacity_tokens: usize,
    pub models: Vec<BenchModel>,
}

fn default_runs() -> usize {
    10
}

fn default_modes() -> Vec<ExecutionMode> {
    vec![ExecutionMode::Unpadded, ExecutionMode::Padded]
}

fn default_capacity() -> usize {
    8192
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchModel {
    pub name: String,
    /// Either a checkpoint path or a fresh preset.
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub max_seq_len: Option<usize>,
    #[serde(default)]
    pub global_period: Option<usize>,
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Loads, applies `--set` overrides, validates (collecting every violation),
/// and parses the run config. Returns the parsed config plus the final JSON
/// document (echoed into the manifest).
pub fn load_config(path: &Path, sets: &[String]) -> Result<(RunConfig, Value), CliError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&raw)
        .map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
    for set in sets {
        apply_set(&mut value, set)?;
    }
    let violations = validate(&value);
    if !violations.is_empty() {
        return Err(CliError::Config(format!(
            "config violates the schema:\n  - {}",
            violations.join("\n  - ")
        )));
    }
    let config: RunConfig = serde_json::from_value(value.clone())
        .map_err(|e| CliError::Config(format!("config rejected: {e}")))?;
    Ok((config, value))
}

/// Applies one `path=value` override; the value parses as JSON when possible
/// and falls back to a plain string.
fn apply_set(root: &mut Value, set: &str) -> Result<(), CliError> {
    let (path, raw_value) = set
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set {set:?} is not of the form path=value")))?;
    let new_value: Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| Value::String(raw_value.to_string()));
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let last = i == segments.len() - 1;
        if let Ok(index) = segment.parse::<usize>() {
            let arr = cursor
                .as_array_mut()
                .ok_or_else(|| CliError::Config(format!("--set {path}: {segment} indexes a non-array")))?;
            if index >= arr.len() {
                return Err(CliError::Config(format!(
                    "--set {path}: index {index} out of bounds"
                )));
            }
            if last {
                arr[index] = new_value;
                return Ok(());
            }
            cursor = &mut arr[index];
        } else {
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| CliError::Config(format!("--set {path}: {segment} indexes a non-object")))?;
            if last {
                obj.insert(segment.to_string(), new_value);
                return Ok(());
            }
            cursor = obj
                .get_mut(*segment)
                .ok_or_else(|| CliError::Config(format!("--set {path}: no key {segment:?}")))?;
        }
    }
    Ok(())
}

// --- schema -----------------------------------------------------------------

struct Checker {
    violations: Vec<String>,
}

impl Checker {
    fn object<'a>(&mut self, v: &'a Value, at: &str) -> Option<&'a serde_json::Map<String, Value>> {
        match v.as_object() {
            Some(m) => Some(m),
            None => {
                self.violations.push(format!("{at}: expected an object"));
                None
            }
        }
    }

    fn keys(&mut self, m: &serde_json::Map<String, Value>, at: &str, allowed: &[&str], required: &[&str]) {
        for key in m.keys() {
            if !allowed.contains(&key.as_str()) {
                self.violations.push(format!("{at}: unknown key {key:?}"));
            }
        }
        for key in required {
            if !m.contains_key(*key) {
                self.violations.push(format!("{at}: missing required key {key:?}"));
            }
        }
    }

    fn expect(&mut self, m: &serde_json::Map<String, Value>, at: &str, key: &str, kind: Kind) {
        if let Some(v) = m.get(key) {
            self.check_kind(v, &format!("{at}.{key}"), kind);
        }
    }

    fn check_kind(&mut self, v: &Value, at: &str, kind: Kind) {
        let ok = match kind {
            Kind::Uint => v.as_u64().is_some(),
            Kind::Number => v.is_number(),
            Kind::Str => v.is_string(),
            Kind::StrArray => v
                .as_array()
                .is_some_and(|a| a.iter().all(|x| x.is_string())),
            Kind::NumArray => v
                .as_array()
                .is_some_and(|a| a.iter().all(|x| x.is_number())),
            Kind::UintOrNull => v.is_null() || v.as_u64().is_some(),
            Kind::Array => v.is_array(),
        };
        if !ok {
            self.violations
                .push(format!("{at}: expected {}", kind.describe()));
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Uint,
    Number,
    Str,
    StrArray,
    NumArray,
    UintOrNull,
    Array,
}

impl Kind {
    fn describe(self) -> &'static str {
        match self {
            Kind::Uint => "a non-negative integer",
            Kind::Number => "a number",
            Kind::Str => "a string",
            Kind::StrArray => "an array of strings",
            Kind::NumArray => "an array of numbers",
            Kind::UintOrNull => "an integer or null",
            Kind::Array => "an array",
        }
    }
}

/// Validates the raw document, returning every violation found.
pub fn validate(value: &Value) -> Vec<String> {
    let mut c = Checker {
        violations: Vec::new(),
    };
    let Some(root) = c.object(value, "$") else {
        return c.violations;
    };
    c.keys(
        root,
        "$",
        &["global_seed", "output_dir", "tokenizer", "model", "phases", "tasks", "bench"],
        &["global_seed", "output_dir", "tokenizer", "model"],
    );
    c.expect(root, "$", "global_seed", Kind::Uint);
    c.expect(root, "$", "output_dir", Kind::Str);

    if let Some(tok) = root.get("tokenizer").and_then(|v| c.object(v, "$.tokenizer")) {
        c.keys(
            tok,
            "$.tokenizer",
            &["corpus_files", "target_size", "vocab_file", "val_fraction"],
            &["corpus_files", "target_size", "vocab_file"],
        );
        c.expect(tok, "$.tokenizer", "corpus_files", Kind::StrArray);
        c.expect(tok, "$.tokenizer", "target_size", Kind::Uint);
        c.expect(tok, "$.tokenizer", "vocab_file", Kind::Str);
        c.expect(tok, "$.tokenizer", "val_fraction", Kind::Number);
    }

    if let Some(model) = root.get("model").and_then(|v| c.object(v, "$.model")) {
        c.keys(
            model,
            "$.model",
            &[
                "preset", "n_layers", "d_model", "n_heads", "d_ff", "max_seq_len", "window",
                "global_period", "rope_theta_global", "rope_theta_local", "dropout",
            ],
            &["preset"],
        );
        c.expect(model, "$.model", "preset", Kind::Str);
        for key in ["n_layers", "d_model", "n_heads", "d_ff", "max_seq_len", "window", "global_period"] {
            c.expect(model, "$.model", key, Kind::Uint);
        }
        for key in ["rope_theta_global", "rope_theta_local", "dropout"] {
            c.expect(model, "$.model", key, Kind::Number);
        }
    }

    if let Some(phases) = root.get("phases") {
        c.check_kind(phases, "$.phases", Kind::Array);
        for (i, phase) in phases.as_array().into_iter().flatten().enumerate() {
            let at = format!("$.phases.{i}");
            let Some(p) = c.object(phase, &at) else { continue };
            c.keys(
                p,
                &at,
                &[
                    "name", "sources", "mlm_probability", "peak_lr", "schedule", "warmup_steps",
                    "weight_decay", "batch_capacity_tokens", "checkpoint_interval",
                ],
                &["name", "sources", "mlm_probability", "peak_lr", "schedule", "weight_decay", "batch_capacity_tokens"],
            );
            c.expect(p, &at, "name", Kind::Str);
            c.expect(p, &at, "mlm_probability", Kind::Number);
            c.expect(p, &at, "peak_lr", Kind::Number);
            c.expect(p, &at, "warmup_steps", Kind::Uint);
            c.expect(p, &at, "weight_decay", Kind::Number);
            c.expect(p, &at, "batch_capacity_tokens", Kind::Uint);
            c.expect(p, &at, "checkpoint_interval", Kind::UintOrNull);
            if let Some(sources) = p.get("sources") {
                c.check_kind(sources, &format!("{at}.sources"), Kind::Array);
                for (j, src) in sources.as_array().into_iter().flatten().enumerate() {
                    let sat = format!("{at}.sources.{j}");
                    if let Some(s) = c.object(src, &sat) {
                        c.keys(s, &sat, &["corpus_id", "epochs"], &["corpus_id", "epochs"]);
                        c.expect(s, &sat, "corpus_id", Kind::Str);
                        c.expect(s, &sat, "epochs", Kind::Uint);
                    }
                }
            }
            if let Some(schedule) = p.get("schedule") {
                let sat = format!("{at}.schedule");
                let ok = match schedule {
                    Value::String(s) => s == "stable" || s == "one_minus_sqrt",
                    Value::Object(m) => {
                        m.len() == 1
                            && m.get("constant_then_one_minus_sqrt")
                                .and_then(|v| v.as_object())
                                .is_some_and(|inner| {
                                    inner.len() == 1
                                        && inner.get("constant_fraction").is_some_and(|f| f.is_number())
                                })
                    }
                    _ => false,
                };
                if !ok {
                    c.violations.push(format!(
                        "{sat}: expected \"stable\", \"one_minus_sqrt\", or {{\"constant_then_one_minus_sqrt\": {{\"constant_fraction\": <number>}}}}"
                    ));
                }
            }
        }
    }

    if let Some(tasks) = root.get("tasks") {
        c.check_kind(tasks, "$.tasks", Kind::Array);
        for (i, task) in tasks.as_array().into_iter().flatten().enumerate() {
            let at = format!("$.tasks.{i}");
            let Some(t) = c.object(task, &at) else { continue };
            c.keys(t, &at, &["spec", "dataset"], &["spec", "dataset"]);
            if let Some(spec) = t.get("spec").and_then(|v| c.object(v, &format!("{at}.spec"))) {
                let sat = format!("{at}.spec");
                c.keys(
                    spec,
                    &sat,
                    &[
                        "name", "kind", "n_classes", "entity_types", "lr_grid", "epochs",
                        "batch_size", "weight_decay", "seeds", "patience", "max_len",
                    ],
                    &["name", "kind", "lr_grid"],
                );
                c.expect(spec, &sat, "name", Kind::Str);
                c.expect(spec, &sat, "lr_grid", Kind::NumArray);
                c.expect(spec, &sat, "entity_types", Kind::StrArray);
                c.expect(spec, &sat, "seeds", Kind::NumArray);
                for key in ["n_classes", "epochs", "batch_size", "patience"] {
                    c.expect(spec, &sat, key, Kind::Uint);
                }
                c.expect(spec, &sat, "weight_decay", Kind::Number);
                if let Some(kind) = spec.get("kind") {
                    let valid = kind
                        .as_str()
                        .is_some_and(|k| ["single_label", "multi_label", "token_bio"].contains(&k));
                    if !valid {
                        c.violations.push(format!(
                            "{sat}.kind: expected one of single_label, multi_label, token_bio"
                        ));
                    }
                }
            }
            if let Some(ds) = t.get("dataset").and_then(|v| c.object(v, &format!("{at}.dataset"))) {
                let dat = format!("{at}.dataset");
                c.keys(ds, &dat, &["train", "val", "test"], &["train", "val", "test"]);
                for key in ["train", "val", "test"] {
                    c.expect(ds, &dat, key, Kind::Str);
                }
            }
        }
    }

    if let Some(bench) = root.get("bench") {
        if !bench.is_null() {
            if let Some(b) = c.object(bench, "$.bench") {
                c.keys(
                    b,
                    "$.bench",
                    &["workloads", "runs", "modes", "batch_capacity_tokens", "models"],
                    &["workloads", "models"],
                );
                c.expect(b, "$.bench", "runs", Kind::Uint);
                c.expect(b, "$.bench", "batch_capacity_tokens", Kind::Uint);
                for (i, w) in b
                    .get("workloads")
                    .and_then(|v| v.as_array())
                    .into_iter()
                    .flatten()
                    .enumerate()
                {
                    let at = format!("$.bench.workloads.{i}");
                    if let Some(wl) = c.object(w, &at) {
                        c.keys(
                            wl,
                            &at,
                            &["id", "n_docs", "length_mode", "max_len", "seed"],
                            &["id", "n_docs", "length_mode", "max_len", "seed"],
                        );
                        c.expect(wl, &at, "id", Kind::Str);
                        c.expect(wl, &at, "n_docs", Kind::Uint);
                        c.expect(wl, &at, "max_len", Kind::Uint);
                        c.expect(wl, &at, "seed", Kind::Uint);
                    }
                }
                for (i, m) in b
                    .get("models")
                    .and_then(|v| v.as_array())
                    .into_iter()
                    .flatten()
                    .enumerate()
                {
                    let at = format!("$.bench.models.{i}");
                    if let Some(bm) = c.object(m, &at) {
                        c.keys(
                            bm,
                            &at,
                            &["name", "checkpoint", "preset", "max_seq_len", "global_period", "window", "seed"],
                            &["name"],
                        );
                        c.expect(bm, &at, "name", Kind::Str);
                        c.expect(bm, &at, "checkpoint", Kind::Str);
                        c.expect(bm, &at, "preset", Kind::Str);
                        c.expect(bm, &at, "max_seq_len", Kind::Uint);
                        c.expect(bm, &at, "seed", Kind::Uint);
                    }
                }
            }
        }
    }

    c.violations
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Value {
        serde_json::json!({
            "global_seed": 1,
            "output_dir": "out",
            "tokenizer": {"corpus_files": ["c.jsonl"], "target_size": 300, "vocab_file": "v.txt"},
            "model": {"preset": "tiny"}
        })
    }

    #[test]
    fn minimal_config_passes() {
        assert!(validate(&minimal()).is_empty());
    }

    #[test]
    fn all_violations_are_collected() {
        let bad = serde_json::json!({
            "output_dir": 7,
            "tokenizer": {"corpus_files": "nope", "vocab_file": "v"},
            "model": {"preset": "tiny", "bogus": 1},
            "surprise": true
        });
        let violations = validate(&bad);
        assert!(violations.len() >= 4, "{violations:?}");
        assert!(violations.iter().any(|v| v.contains("global_seed")));
        assert!(violations.iter().any(|v| v.contains("surprise")));
        assert!(violations.iter().any(|v| v.contains("corpus_files")));
        assert!(violations.iter().any(|v| v.contains("bogus")));
        assert!(violations.iter().any(|v| v.contains("output_dir")));
    }

    #[test]
    fn set_overrides_nested_and_indexed_paths() {
        let mut v = minimal();
        apply_set(&mut v, "tokenizer.target_size=500").unwrap();
        assert_eq!(v["tokenizer"]["target_size"], 500);
        apply_set(&mut v, "model.preset=small").unwrap();
        assert_eq!(v["model"]["preset"], "small");
        apply_set(&mut v, "tokenizer.corpus_files.0=other.jsonl").unwrap();
        assert_eq!(v["tokenizer"]["corpus_files"][0], "other.jsonl");
        assert!(apply_set(&mut v, "no-equals-sign").is_err());
    }
}
