//! Experiment configuration: a TOML document, dotted-path overrides, and a
//! canonical hash.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use deltalab_core::diagnostics::FailureThresholds;
use deltalab_core::trainer::{ModelSpec, TrainConfig};
use deltalab_core::world::{make_benchmark_world, World, WorldSpec, MAX_DIM};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "DELTALAB_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rollouts: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rollouts: 50,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Root under which run directories are created. Falls back to
    /// `$DELTALAB_OUT`, then `runs`. Not part of the config hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream of a run is derived from it.
    pub seed: u64,
    pub world: WorldSpec,
    pub models: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub diagnostics: FailureThresholds,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldSpec::default(),
            models: ModelSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            diagnostics: FailureThresholds::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow!("config: {e}"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Loads `path` when given, otherwise the defaults, then applies
    /// overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let base = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        base.with_overrides(overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config")
    }

    /// Sets each dotted path to the given value. Values are read as TOML
    /// literals, falling back to plain strings.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Value::try_from(self).context("serializing config")?;
        for (path, raw) in overrides {
            set_path(&mut doc, path, parse_literal(raw)).with_context(|| format!("override --{path}"))?;
        }
        let text = toml::to_string(&doc)?;
        Self::from_toml(&text)
    }

    /// Field-path checks that need no computation.
    pub fn validate(&self) -> Result<()> {
        let world = self.world().context("world")?;
        if world.dim() > MAX_DIM {
            bail!("world.modes: dimension {} exceeds {MAX_DIM}", world.dim());
        }
        if world.conditions().len() < 2 {
            bail!("world.conditions: streaming tuning switches between at least 2 conditions");
        }
        self.train.validate().map_err(|e| anyhow!("train: {e}"))?;
        if self.train.rollout.events > self.train.rollout.video_len / self.train.rollout.chunk_len {
            bail!("train.rollout.events: more events than chunks per rollout");
        }
        if self.models.features.descriptor_dim == 0 {
            bail!("models.features.descriptor_dim must be positive");
        }
        if !(self.models.critic.sigma_ref > 0.0) {
            bail!("models.critic.sigma_ref must be positive");
        }
        if self.eval.rollouts == 0 {
            bail!("eval.rollouts must be at least 1");
        }
        Ok(())
    }

    pub fn world(&self) -> Result<World> {
        make_benchmark_world(&self.world).map_err(Into::into)
    }

    /// The config with its output location removed; what gets hashed.
    pub fn canonical(&self) -> Self {
        Self {
            output: OutputConfig::default(),
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the canonical config as key-sorted JSON.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self.canonical()).expect("config serializes to JSON");
        let bytes = serde_json::to_vec(&value).expect("JSON value serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn output_root(&self) -> PathBuf {
        self.output
            .root
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(doc: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert((*part).to_string(), value);
                    return Ok(());
                }
                t.entry((*part).to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| anyhow!("{}: expected an array index", parts[..=i].join(".")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| anyhow!("{}: index out of range (length {len})", parts[..=i].join(".")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("{} is not a table", parts[..i].join(".")),
        };
    }
    Ok(())
}

/// Splits trailing `--a.b value` / `--a.b=value` arguments into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| anyhow!("unexpected argument {arg:?}; overrides look like --train.steps 100"))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| anyhow!("override --{key} has no value"))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn overrides_by_dotted_path() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[
                ("train.steps".into(), "17".into()),
                ("train.flags.no_gate".into(), "true".into()),
                ("train.teacher".into(), "history_aware".into()),
                ("world.modes.0.variance".into(), "0.5".into()),
                ("train.gate.mu".into(), "0.3".into()),
            ])
            .unwrap();
        assert_eq!(cfg.train.steps, 17);
        assert!(cfg.train.flags.no_gate);
        assert_eq!(cfg.train.teacher, deltalab_core::world::TeacherKind::HistoryAware);
        assert_eq!(cfg.world.modes[0].variance, 0.5);
        assert_eq!(cfg.train.gate.mu, Some(0.3));
    }

    #[test]
    fn unknown_fields_are_rejected_with_their_path() {
        let err = ExperimentConfig::default()
            .with_overrides(&[("train.stepz".into(), "3".into())])
            .unwrap_err();
        assert!(format!("{err:#}").contains("stepz"), "{err:#}");
    }

    #[test]
    fn hash_ignores_key_order_and_output_root() {
        let a = ExperimentConfig::from_toml("seed = 3\n[train]\nsteps = 10\nwarmup_steps = 5\n").unwrap();
        let b = ExperimentConfig::from_toml("seed = 3\n[output]\nroot = \"/tmp/x\"\n[train]\nwarmup_steps = 5\nsteps = 10\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = a.with_overrides(&[("train.steps".into(), "11".into())]).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn override_parsing() {
        let args: Vec<String> = ["--train.steps", "5", "--seed=9"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            parse_overrides(&args).unwrap(),
            vec![("train.steps".to_string(), "5".to_string()), ("seed".to_string(), "9".to_string())]
        );
        assert!(parse_overrides(&["--x".to_string()]).is_err());
        assert!(parse_overrides(&["x".to_string()]).is_err());
    }

    #[test]
    fn validation_reports_field_paths() {
        let bad = ExperimentConfig::default()
            .with_overrides(&[("train.rollout.chunk_len".into(), "5".into())])
            .unwrap();
        let msg = format!("{:#}", bad.validate().unwrap_err());
        assert!(msg.contains("train"), "{msg}");
        let bad = ExperimentConfig::default()
            .with_overrides(&[("eval.rollouts".into(), "0".into())])
            .unwrap();
        assert!(format!("{:#}", bad.validate().unwrap_err()).contains("eval.rollouts"));
    }
}
