//! Run configuration: a preset, an optional TOML file and command-line
//! overrides, merged in that order.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use endovid_core::data::SyntheticSpec;
use endovid_core::distill::DistillConfig;
use endovid_core::model::ModelConfig;
use endovid_core::probe::ProbeConfig;
use endovid_core::views::{LocalMode, ViewConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "ENDOVID_SEED";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory holding `manifest.json`.
    pub root: Option<PathBuf>,
    /// Generator settings used by `make-data`.
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: None,
            out_dir: PathBuf::from("runs/latest"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub views: ViewConfig,
    pub data: DataSection,
    pub run: RunSection,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Preset::Desk.config()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size model and views as published.
    Paper,
    /// Small model for single-core experiments.
    #[default]
    Desk,
    /// Smallest configuration, used for gradient checks.
    Tiny,
}

impl Preset {
    pub fn config(self) -> RunConfig {
        let (model, views, distill) = match self {
            Preset::Paper => (ModelConfig::paper(), ViewConfig::paper(), DistillConfig::paper()),
            Preset::Desk => (ModelConfig::desk(), ViewConfig::desk(), DistillConfig::desk()),
            Preset::Tiny => (ModelConfig::tiny(), ViewConfig::tiny(), DistillConfig::desk()),
        };
        let probe = ProbeConfig {
            frames: 8.min(model.max_frames),
            ..ProbeConfig::default()
        };
        RunConfig {
            model,
            distill,
            views,
            data: DataSection::default(),
            run: RunSection::default(),
            probe,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LocalModeArg {
    Full,
    SpatialOnly,
    TemporalOnly,
}

impl From<LocalModeArg> for LocalMode {
    fn from(m: LocalModeArg) -> Self {
        match m {
            LocalModeArg::Full => LocalMode::Full,
            LocalModeArg::SpatialOnly => LocalMode::SpatialOnly,
            LocalModeArg::TemporalOnly => LocalMode::TemporalOnly,
        }
    }
}

/// Options shared by every command that reads a run configuration.
#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    /// TOML file with `model`, `distill`, `views`, `data`, `run` and `probe`
    /// tables.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Defaults the file is applied on top of.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Overrides `run.seed` and the ENDOVID_SEED variable.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Set any key, e.g. `--set distill.teacher_temp=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Ablation and training overrides of `pretrain`.
#[derive(Clone, Debug, Default, Args)]
pub struct TrainArgs {
    /// Dataset directory (overrides `data.root`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (overrides `run.out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Drop the cross-view term.
    #[arg(long)]
    pub disable_cv: bool,
    /// Drop the dynamic motion term.
    #[arg(long)]
    pub disable_dm: bool,
    /// Turn off teacher centering.
    #[arg(long)]
    pub no_centering: bool,
    #[arg(long, value_enum)]
    pub local_mode: Option<LocalModeArg>,
    /// Number of global views G.
    #[arg(long, visible_alias = "G")]
    pub global_views: Option<usize>,
    /// Number of local views L.
    #[arg(long, visible_alias = "L")]
    pub local_views: Option<usize>,
    /// Local frame-count set T_l, comma separated.
    #[arg(long, visible_alias = "Tl", value_delimiter = ',')]
    pub local_frames: Option<Vec<usize>>,
    /// Global frame-count set, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub global_frames: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub teacher_temp: Option<f64>,
    #[arg(long)]
    pub student_temp: Option<f64>,
    #[arg(long)]
    pub ema_momentum: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = &self.data {
            cfg.data.root = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.run.out_dir = o.clone();
        }
        if self.disable_cv {
            cfg.distill.cross_view = false;
        }
        if self.disable_dm {
            cfg.distill.dynamic_motion = false;
        }
        if self.no_centering {
            cfg.distill.centering = false;
        }
        if let Some(m) = self.local_mode {
            cfg.views.local_mode = m.into();
        }
        if let Some(g) = self.global_views {
            cfg.views.global_views = g;
        }
        if let Some(l) = self.local_views {
            cfg.views.local_views = l;
        }
        if let Some(t) = &self.local_frames {
            cfg.views.local_frames = t.clone();
        }
        if let Some(t) = &self.global_frames {
            cfg.views.global_frames = t.clone();
        }
        if let Some(e) = self.epochs {
            cfg.distill.epochs = e;
        }
        if let Some(m) = self.max_steps {
            cfg.distill.max_steps = Some(m);
        }
        if let Some(b) = self.batch_size {
            cfg.distill.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.distill.optimizer.lr = lr;
            cfg.distill.final_lr = cfg.distill.final_lr.min(lr);
        }
        if let Some(t) = self.teacher_temp {
            cfg.distill.teacher_temp = t;
        }
        if let Some(t) = self.student_temp {
            cfg.distill.student_temp = t;
        }
        if let Some(a) = self.ema_momentum {
            cfg.distill.ema_momentum = a;
        }
        if let Some(c) = self.checkpoint_every {
            cfg.distill.checkpoint_every = c;
        }
    }
}

fn config_error(field: impl Into<String>, reason: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Merge `patch` into `base`, table by table.
fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_assignment(s: &str) -> Result<toml::Table, CliError> {
    let (key, value) = s
        .split_once('=')
        .ok_or_else(|| config_error(s, "expected KEY=VALUE"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(config_error(key, "malformed key"));
    }
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.trim().to_string()),
    };
    let mut table = toml::Table::new();
    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = &mut table;
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("fresh table");
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(table)
}

fn to_table(cfg: &RunConfig) -> toml::Table {
    toml::Table::try_from(cfg).expect("config serialises to a table")
}

pub fn load_config_file(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error("--config", format!("{}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| config_error(path.display().to_string(), e.to_string()))
}

impl ConfigArgs {
    /// Preset, then file, then `--set` assignments; the seed is resolved as
    /// `--seed`, then `run.seed`, then `ENDOVID_SEED`, then 0.
    pub fn resolve(&self, default_preset: Preset) -> Result<RunConfig, CliError> {
        let mut table = to_table(&self.preset.unwrap_or(default_preset).config());
        if let Some(path) = &self.config {
            merge(&mut table, load_config_file(path)?);
        }
        for s in &self.set {
            merge(&mut table, parse_assignment(s)?);
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(field_of(&e), e.message().to_string()))?;
        cfg.run.seed = Some(resolve_seed(self.seed, cfg.run.seed)?);
        Ok(cfg)
    }
}

fn field_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    match msg.split('`').nth(1) {
        Some(f) if msg.contains("field") => f.to_string(),
        _ => "config".to_string(),
    }
}

pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| config_error(SEED_ENV, format!("`{v}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.run.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.views.validate()?;
        self.distill.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let p = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&p, self.to_toml()).map_err(|e| CliError::Runtime(endovid_core::Error::Io {
            path: p.clone(),
            source: e,
        }))?;
        Ok(p)
    }
}
