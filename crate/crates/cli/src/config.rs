//! Run configuration: a TOML file with `[data]`, `[cotrain]` and `[model]`
//! tables, environment overrides and sweep grid points.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context, Result};
use cqr_core::cotrain::{CoTrainConfig, Mode};
use cqr_core::genmodel::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const ENV_PREFIX: &str = "COTRAIN_";
const SECTIONS: [&str; 3] = ["data", "cotrain", "model"];

/// Generate the datasets in-process instead of reading files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub sessions: usize,
    #[serde(default = "default_turns")]
    pub turns: usize,
    #[serde(default = "default_labeled")]
    pub labeled_sessions: usize,
    #[serde(default = "default_test")]
    pub test_sessions: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_turns() -> usize {
    3
}

fn default_labeled() -> usize {
    16
}

fn default_test() -> usize {
    100
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labeled: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_s: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_r: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSource>,
    pub run_dir: PathBuf,
}

/// Fully resolved configuration; its TOML form is the run's snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub cotrain: CoTrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
}

impl RunConfig {
    /// Read `path`, apply `COTRAIN_<SECTION>_<KEY>` overrides from `env` and
    /// resolve relative paths against the file's directory.
    pub fn load(path: &Path, env: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        apply_env(&mut table, env)?;
        let path = std::path::absolute(path)?;
        let base = path.parent().unwrap_or(Path::new("/"));
        Self::from_table(table, base)
    }

    pub fn from_table(table: toml::Table, base: &Path) -> Result<Self> {
        if let Some(model) = table.get("model").and_then(|m| m.as_table()) {
            for key in ["learning_rate", "seed"] {
                if model.contains_key(key) {
                    bail!(UsageError(format!(
                        "field `model.{key}`: set `cotrain.{key}` instead"
                    )));
                }
            }
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| UsageError(e.message().to_owned()))?;
        cfg.resolve_paths(base);
        cfg.model.learning_rate = cfg.cotrain.learning_rate;
        cfg.model.seed = cfg.cotrain.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let data = &mut self.data;
        for p in [
            &mut data.labeled,
            &mut data.pool_s,
            &mut data.pool_r,
            &mut data.test,
        ]
        .into_iter()
        .flatten()
        {
            *p = absolute(base, p);
        }
        data.run_dir = absolute(base, &data.run_dir);
    }

    fn validate(&self) -> Result<()> {
        let usage = |e: cqr_core::Error| UsageError(e.to_string());
        self.cotrain.validate().map_err(usage)?;
        self.model.validate().map_err(usage)?;
        let d = &self.data;
        if d.run_dir.as_os_str().is_empty() {
            bail!(UsageError("field `data.run_dir`: missing".into()));
        }
        let files = d.pool_s.is_some() || d.pool_r.is_some() || d.labeled.is_some();
        match (&d.synthetic, files) {
            (Some(_), true) => bail!(UsageError(
                "field `data.synthetic`: cannot be combined with dataset paths".into()
            )),
            (None, false) => bail!(UsageError(
                "field `data.pool_s`: give pool paths or a `data.synthetic` table".into()
            )),
            (None, true) if d.pool_s.is_none() || d.pool_r.is_none() => bail!(UsageError(
                "field `data.pool_s`/`data.pool_r`: both pools are required".into()
            )),
            _ => {}
        }
        match self.cotrain.mode {
            Mode::ZeroShot if d.labeled.is_some() => bail!(UsageError(
                "field `cotrain.mode`: ZERO_SHOT conflicts with `data.labeled`".into()
            )),
            Mode::FewShot if d.synthetic.is_none() && d.labeled.is_none() => bail!(UsageError(
                "field `data.labeled`: required in FEW_SHOT mode".into()
            )),
            _ => {}
        }
        if let Some(s) = &d.synthetic {
            if s.sessions == 0 {
                bail!(UsageError(
                    "field `data.synthetic.sessions`: must be at least 1".into()
                ));
            }
        }
        Ok(())
    }

    /// TOML text that loads back to `self`. The model's learning rate and
    /// seed are omitted since they always come from `[cotrain]`.
    pub fn snapshot(&self) -> Result<String> {
        Ok(toml::to_string(&self.to_table()?)?)
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        let mut table = toml::Table::try_from(self)?;
        if let Some(model) = table.get_mut("model").and_then(|m| m.as_table_mut()) {
            model.remove("learning_rate");
            model.remove("seed");
        }
        Ok(table)
    }
}

/// `base.join(p)` with `.` and `..` folded lexically.
fn absolute(base: &Path, p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in base.join(p).components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

/// Interpret a raw override as a TOML value, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

/// Set `section.key` in a raw config table.
pub fn set_key(table: &mut toml::Table, section: &str, key: &str, raw: &str) -> Result<()> {
    if !SECTIONS.contains(&section) {
        bail!(UsageError(format!("unknown config section `{section}`")));
    }
    let entry = table
        .entry(section.to_owned())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let Some(t) = entry.as_table_mut() else {
        bail!(UsageError(format!("`{section}` is not a table")));
    };
    t.insert(key.to_owned(), parse_value(raw));
    Ok(())
}

fn apply_env(table: &mut toml::Table, env: &[(String, String)]) -> Result<()> {
    for (name, value) in env {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let rest = rest.to_ascii_lowercase();
        let Some((section, key)) = rest.split_once('_') else {
            bail!(UsageError(format!(
                "environment override `{name}` has no key"
            )));
        };
        set_key(table, section, key, value)?;
    }
    Ok(())
}

/// `COTRAIN_*` variables of the current process, sorted by name.
pub fn env_overrides() -> Vec<(String, String)> {
    let mut vars: Vec<_> = std::env::vars()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    vars
}

/// Parse `key=v1,v2,key2=v3` into an ordered map of cotrain keys to values.
pub fn parse_sweep(spec: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut grid: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let value = match token.split_once('=') {
            Some((k, v)) => {
                let key = k.trim().to_owned();
                if grid.contains_key(&key) {
                    bail!(UsageError(format!("sweep key `{key}` given twice")));
                }
                grid.insert(key.clone(), Vec::new());
                current = Some(key);
                v.trim()
            }
            None => token,
        };
        let Some(key) = &current else {
            bail!(UsageError(format!("sweep value `{token}` has no key")));
        };
        if value.is_empty() {
            bail!(UsageError(format!("sweep key `{key}` has an empty value")));
        }
        grid.get_mut(key)
            .expect("inserted above")
            .push(value.to_owned());
    }
    if grid.is_empty() || grid.values().any(Vec::is_empty) {
        bail!(UsageError(format!("empty sweep `{spec}`")));
    }
    Ok(grid)
}

/// Cartesian product of a sweep grid, in lexicographic key order.
pub fn grid_points(grid: &BTreeMap<String, Vec<String>>) -> Vec<Vec<(String, String)>> {
    grid.iter().fold(vec![Vec::new()], |acc, (key, values)| {
        acc.iter()
            .flat_map(|point| {
                values.iter().map(move |v| {
                    let mut p = point.clone();
                    p.push((key.clone(), v.clone()));
                    p
                })
            })
            .collect()
    })
}

/// Directory name of a grid point, e.g. `s_r=p40_s_s=p60`.
pub fn point_name(point: &[(String, String)]) -> String {
    point
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("_")
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "=_.-+".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}
