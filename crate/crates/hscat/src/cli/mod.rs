//! Command-line interface: desk-scale drivers over the library crates.
//!
//! Every command resolves its configuration in three layers — the versioned
//! defaults file, an optional `--config` TOML/JSON file, then explicit flags
//! — and echoes the result into its run directory. Exit codes: 0 success,
//! 2 validation error, 3 numerical failure.

mod dataset;
mod evalcmd;
mod gradcheck;
mod infer;
mod optimize;
mod render;
mod synth;
mod train;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::error::{HscatError, Result};

pub const DESK_DEFAULTS: &str = include_str!("desk_defaults.toml");
const DEFAULTS_VERSION: i64 = 1;

#[derive(Debug, Parser)]
#[command(name = "hscat", version, about = "Desk-scale heterogeneous inverse scattering")]
pub struct Cli {
    /// TOML or JSON config file with per-command sections.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Cap on worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Machine-readable one-line JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Synthesize a seeded heterogeneous scattering field.
    Synth(synth::SynthArgs),
    /// Render one view of a stored field.
    Render(render::RenderArgs),
    /// Generate a multi-view dataset with its manifest.
    Dataset(dataset::DatasetArgs),
    /// Train the feed-forward reconstruction model.
    Train(train::TrainArgs),
    /// Feed-forward inference on one dataset sample.
    Infer(infer::InferArgs),
    /// Per-scene inverse optimization against rendered targets.
    Optimize(optimize::OptimizeArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(evalcmd::EvalArgs),
    /// Finite-difference verification of gradients and adjoints.
    Gradcheck(gradcheck::GradcheckArgs),
}

/// Flags shared by every command that writes a run directory.
#[derive(Debug, Args)]
pub struct OutArg {
    /// Output run directory (must be empty or absent).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

pub fn run(cli: &Cli) -> Result<Value> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(HscatError::validation("--threads must be at least 1"));
        }
        // Affects rayon iterators (dataset generation); training builds its
        // own pool from the same flag. A pre-initialized pool is fine.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    match &cli.cmd {
        Cmd::Synth(a) => synth::run(cli, a),
        Cmd::Render(a) => render::run(cli, a),
        Cmd::Dataset(a) => dataset::run(cli, a),
        Cmd::Train(a) => train::run(cli, a),
        Cmd::Infer(a) => infer::run(cli, a),
        Cmd::Optimize(a) => optimize::run(cli, a),
        Cmd::Eval(a) => evalcmd::run(cli, a),
        Cmd::Gradcheck(a) => gradcheck::run(cli, a),
    }
}

pub fn print_summary(json_mode: bool, summary: &Value) {
    if json_mode {
        println!("{summary}");
    } else if let Value::Object(map) = summary {
        for (k, v) in map {
            println!("{k} = {v}");
        }
    } else {
        println!("{summary}");
    }
}

// -- Config resolution --------------------------------------------------------

fn toml_to_json(v: toml::Value) -> Value {
    serde_json::to_value(v).expect("TOML values map to JSON")
}

fn defaults_section(cmd: &str) -> Result<Value> {
    let table: toml::Value = toml::from_str(DESK_DEFAULTS)
        .map_err(|e| HscatError::Format(format!("defaults file: {e}")))?;
    let version = table.get("version").and_then(toml::Value::as_integer);
    if version != Some(DEFAULTS_VERSION) {
        return Err(HscatError::Format(format!(
            "defaults file version {version:?}, expected {DEFAULTS_VERSION}"
        )));
    }
    Ok(table
        .get(cmd)
        .cloned()
        .map(toml_to_json)
        .unwrap_or_else(|| Value::Object(Default::default())))
}

fn load_user_config(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| HscatError::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            let v: toml::Value = toml::from_str(&text)
                .map_err(|e| HscatError::validation(format!("{}: {e}", path.display())))?;
            Ok(toml_to_json(v))
        }
        Some("json") => serde_json::from_str(&text)
            .map_err(|e| HscatError::validation(format!("{}: {e}", path.display()))),
        other => Err(HscatError::validation(format!(
            "config {} has unsupported extension {other:?} (use .toml or .json)",
            path.display()
        ))),
    }
}

/// Deep-merge `over` onto `base`: objects merge key-wise, scalars replace.
fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// defaults[cmd] ← user config[cmd] ← flag overrides, then typed decode.
/// Returns the typed config and the merged JSON for echoing.
pub fn resolve<T: DeserializeOwned>(
    cmd: &str,
    config: Option<&Path>,
    overrides: Value,
) -> Result<(T, Value)> {
    let mut v = defaults_section(cmd)?;
    if let Some(path) = config {
        let user = load_user_config(path)?;
        if let Some(section) = user.get(cmd) {
            merge(&mut v, section);
        }
    }
    merge(&mut v, &overrides);
    let typed: T = serde_json::from_value(v.clone())
        .map_err(|e| HscatError::validation(format!("{cmd} config: {e}")))?;
    Ok((typed, v))
}

/// `json!` object from only the flags the user actually passed.
#[macro_export]
macro_rules! override_map {
    ($($key:literal => $opt:expr),* $(,)?) => {{
        let mut m = serde_json::Map::new();
        $(
            if let Some(v) = &$opt {
                m.insert($key.to_string(), serde_json::json!(v));
            }
        )*
        serde_json::Value::Object(m)
    }};
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct SynthShape {
        grid: usize,
        shape: String,
        scale: f64,
    }

    #[test]
    fn defaults_file_parses_and_resolves() {
        let (cfg, echo) = resolve::<SynthShape>("synth", None, serde_json::json!({})).unwrap();
        assert_eq!(cfg.grid, 32);
        assert_eq!(cfg.shape, "icosphere");
        assert!(cfg.scale > 0.0);
        assert_eq!(echo["grid"], serde_json::json!(32));
    }

    #[test]
    fn overrides_beat_defaults_and_unknown_keys_error() {
        let (cfg, _) =
            resolve::<SynthShape>("synth", None, serde_json::json!({"grid": 16})).unwrap();
        assert_eq!(cfg.grid, 16);
        let err = resolve::<SynthShape>("synth", None, serde_json::json!({"grit": 16}));
        assert!(err.is_err());
    }

    #[test]
    fn merge_is_deep() {
        let mut base = serde_json::json!({"a": {"x": 1, "y": 2}, "b": 3});
        merge(&mut base, &serde_json::json!({"a": {"y": 9}}));
        assert_eq!(base, serde_json::json!({"a": {"x": 1, "y": 9}, "b": 3}));
    }
}
