//! Layered run configuration: built-in defaults, then an optional TOML
//! file, then `SOCNAV_*` environment variables, then `--set key=value`
//! flags. Later layers win. The fully resolved result is echoed to
//! `config.echo` in the output directory so every run is reproducible
//! from its artifacts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use socnav_core::eval::{BenchmarkConfig, SweepConfig};
use socnav_core::sim::scenario::{RobotSpec, ScenarioGeometry, ScenarioKind};
use socnav_core::trainer::TrainerConfig;
use socnav_core::uncertainty::{DeviationTrainConfig, RhoSmoothing, RolloutConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config file parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bad override '{0}': expected key=value with a dotted key")]
    BadOverride(String),
    #[error("override path '{0}' passes through a non-table value")]
    NotATable(String),
    #[error("resolved config is invalid: {0}")]
    Resolve(toml::de::Error),
    #[error("config echo serialization failed: {0}")]
    Echo(#[from] toml::ser::Error),
}

/// Single-episode settings for `simulate`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub scenario: ScenarioKind,
    pub geometry: ScenarioGeometry,
    pub peds: usize,
    pub dt: f64,
    pub time_limit: f64,
    pub robot: RobotSpec,
    pub robot_visible: bool,
    pub ped_radius: f64,
    pub ped_v_pref: f64,
    /// Per-pedestrian deviation weights are drawn from [0, rho_max);
    /// zero keeps the crowd on plain reciprocal avoidance.
    pub rho_max: f64,
}

impl Default for SimulateConfig {
    fn default() -> SimulateConfig {
        SimulateConfig {
            scenario: ScenarioKind::CircleCrossing,
            geometry: ScenarioGeometry::default(),
            peds: 5,
            dt: 0.25,
            time_limit: 30.0,
            robot: RobotSpec::default(),
            robot_visible: false,
            ped_radius: 0.3,
            ped_v_pref: 1.0,
            rho_max: 0.0,
        }
    }
}

/// How deviation estimates are produced at deployment time.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Estimate reported for pedestrians with no track history yet.
    pub prior: f64,
    pub smoothing: RhoSmoothing,
    /// Windows kept per horizon when building uncertainty datasets.
    pub window_cap: usize,
}

impl Default for EstimatorConfig {
    fn default() -> EstimatorConfig {
        EstimatorConfig {
            prior: 0.5,
            smoothing: RhoSmoothing::default(),
            window_cap: 50_000,
        }
    }
}

/// One section per pipeline stage; each subcommand reads the sections it
/// needs and ignores the rest.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub trainer: TrainerConfig,
    pub rollout: RolloutConfig,
    pub deviation: DeviationTrainConfig,
    pub benchmark: BenchmarkConfig,
    pub sweep: SweepConfig,
    pub simulate: SimulateConfig,
    pub estimator: EstimatorConfig,
}

pub const ENV_PREFIX: &str = "SOCNAV_";

/// Resolve the effective configuration. `env` carries the process
/// environment (injected for tests); variables look like
/// `SOCNAV_TRAINER__HP__GAMMA=0.9`, with `__` separating path segments so
/// key names may keep their own underscores.
pub fn load_config(
    file: Option<&Path>,
    env: impl Iterator<Item = (String, String)>,
    sets: &[String],
) -> Result<AppConfig, ConfigError> {
    let mut root = toml::Value::try_from(AppConfig::default())
        .expect("defaults always serialize");

    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let over: toml::Value = toml::from_str(&text)?;
        merge(&mut root, over);
    }

    for (key, value) in env {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let path: Vec<String> = rest
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.iter().any(|s| s.is_empty()) {
            return Err(ConfigError::BadOverride(key.clone()));
        }
        set_path(&mut root, &path, parse_scalar(&value))?;
    }

    for spec in sets {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(spec.clone()))?;
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        if key.is_empty() || path.iter().any(|s| s.is_empty()) {
            return Err(ConfigError::BadOverride(spec.clone()));
        }
        set_path(&mut root, &path, parse_scalar(value))?;
    }

    root.try_into().map_err(ConfigError::Resolve)
}

/// TOML text of the resolved config, written beside every run's outputs.
pub fn render_echo(cfg: &AppConfig) -> Result<String, ConfigError> {
    Ok(toml::to_string_pretty(cfg)?)
}

/// Tables merge recursively; anything else replaces the base value.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(
    root: &mut toml::Value,
    path: &[String],
    value: toml::Value,
) -> Result<(), ConfigError> {
    let mut node = root;
    for seg in &path[..path.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigError::NotATable(path.join(".")))?;
        node = table
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| ConfigError::NotATable(path.join(".")))?;
    table.insert(path[path.len() - 1].clone(), value);
    Ok(())
}

/// Overrides arrive as bare text. Interpret them as TOML values where
/// possible (numbers, booleans, arrays) and fall back to a plain string,
/// which is what enum variants and paths want anyway.
fn parse_scalar(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn no_env() -> std::iter::Empty<(String, String)> {
        std::iter::empty()
    }

    #[test]
    fn defaults_resolve_and_echo_roundtrips() {
        let cfg = load_config(None, no_env(), &[]).unwrap();
        assert_eq!(cfg.trainer.peds, 5);
        assert_eq!(cfg.benchmark.trials, 100);
        let echo = render_echo(&cfg).unwrap();
        let back: AppConfig = toml::from_str(&echo).unwrap();
        assert_eq!(back.trainer.hp.episodes, cfg.trainer.hp.episodes);
        assert_eq!(back.simulate.peds, cfg.simulate.peds);
    }

    #[test]
    fn file_overrides_defaults_and_sets_override_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[trainer]\npeds = 9\n[trainer.hp]\ngamma = 0.8").unwrap();
        let cfg = load_config(
            Some(f.path()),
            no_env(),
            &["trainer.hp.gamma=0.7".into(), "trainer.variant=reward".into()],
        )
        .unwrap();
        assert_eq!(cfg.trainer.peds, 9);
        assert!((cfg.trainer.hp.gamma - 0.7).abs() < 1e-12);
        assert_eq!(cfg.trainer.variant.as_str(), "reward");
    }

    #[test]
    fn env_overrides_file_but_loses_to_sets() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[simulate]\npeds = 2").unwrap();
        let env = vec![
            ("SOCNAV_SIMULATE__PEDS".to_string(), "7".to_string()),
            ("SOCNAV_SIMULATE__RHO_MAX".to_string(), "0.4".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let cfg = load_config(Some(f.path()), env.into_iter(), &["simulate.peds=3".into()])
            .unwrap();
        assert_eq!(cfg.simulate.peds, 3);
        assert!((cfg.simulate.rho_max - 0.4).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load_config(None, no_env(), &["trainer.pedz=9".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Resolve(_)), "{err}");
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[nosuchsection]\nx = 1").unwrap();
        let err = load_config(Some(f.path()), no_env(), &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Resolve(_)), "{err}");
    }

    #[test]
    fn malformed_overrides_are_rejected() {
        for bad in ["justakey", "=5", "a..b=1"] {
            let err = load_config(None, no_env(), &[bad.to_string()]).unwrap_err();
            assert!(
                matches!(err, ConfigError::BadOverride(_)),
                "{bad} gave {err}"
            );
        }
        let err =
            load_config(None, no_env(), &["trainer.peds.deeper=1".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::NotATable(_)), "{err}");
    }

    #[test]
    fn scalar_parsing_keeps_types() {
        assert_eq!(parse_scalar("7"), toml::Value::Integer(7));
        assert_eq!(parse_scalar("0.5"), toml::Value::Float(0.5));
        assert_eq!(parse_scalar("true"), toml::Value::Boolean(true));
        assert_eq!(
            parse_scalar("circle_crossing"),
            toml::Value::String("circle_crossing".into())
        );
        assert_eq!(
            parse_scalar("[1.0, 2.0]"),
            toml::Value::Array(vec![toml::Value::Float(1.0), toml::Value::Float(2.0)])
        );
    }

    #[test]
    fn tuple_fields_accept_array_overrides() {
        let cfg = load_config(
            None,
            no_env(),
            &["benchmark.ped_v_pref=[0.8, 1.2]".into()],
        )
        .unwrap();
        assert_eq!(cfg.benchmark.ped_v_pref, (0.8, 1.2));
    }
}
