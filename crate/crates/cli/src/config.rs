//! Run configuration: one TOML file per run plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tdeed::data::{FrameEncoding, GeneratorSpec};
use tdeed::infer::InferCfg;
use tdeed::model::ModelCfg;
use tdeed::train::{apply_head_preset, TrainCfg};

/// Invalid configuration (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("configuration error: {0}")]
pub struct ConfigError(pub String);

pub fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()).into())
}

/// Sparsity presets: `fs-like` (0.23% of frames annotated) and `fd-like` (2.2%).
pub fn sparsity_preset(name: &str) -> Result<f64> {
    match name {
        "fs-like" => Ok(0.0023),
        "fd-like" => Ok(0.022),
        other => bad(format!("data.preset: unknown preset `{other}` (fs-like | fd-like)")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataCfg {
    /// Dataset directory; defaults to `<output_dir>/data`.
    pub dir: Option<PathBuf>,
    pub preset: Option<String>,
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_videos: usize,
    pub encoding: FrameEncoding,
    /// Use the validation split for early stopping.
    pub early_stopping: bool,
    pub generator: GeneratorSpec,
}

impl Default for DataCfg {
    fn default() -> Self {
        Self {
            dir: None,
            preset: None,
            train_videos: 50,
            val_videos: 10,
            test_videos: 20,
            encoding: FrameEncoding::F32,
            early_stopping: false,
            generator: GeneratorSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    TemporalModule,
    SkipVariant,
    HeadMode,
    Pyramid,
    ShiftModule,
    ClipLength,
    Postproc,
}

impl std::str::FromStr for Study {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "temporal_module" => Study::TemporalModule,
            "skip_variant" => Study::SkipVariant,
            "head_mode" => Study::HeadMode,
            "pyramid" => Study::Pyramid,
            "shift_module" => Study::ShiftModule,
            "clip_length" => Study::ClipLength,
            "postproc" => Study::Postproc,
            other => return bad(format!("unknown study `{other}`")),
        })
    }
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::TemporalModule => "temporal_module",
            Study::SkipVariant => "skip_variant",
            Study::HeadMode => "head_mode",
            Study::Pyramid => "pyramid",
            Study::ShiftModule => "shift_module",
            Study::ClipLength => "clip_length",
            Study::Postproc => "postproc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateCfg {
    pub seeds: usize,
    pub study: Option<Study>,
    /// Reuse a cell's checkpoint when its manifest records the same config hash.
    pub reuse: bool,
}

impl Default for AblateCfg {
    fn default() -> Self {
        Self {
            seeds: 2,
            study: None,
            reuse: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisKind {
    Discriminability,
    PyramidLayers,
}

impl std::str::FromStr for AnalysisKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discriminability" => Ok(AnalysisKind::Discriminability),
            "pyramid_layers" => Ok(AnalysisKind::PyramidLayers),
            other => bad(format!("unknown analysis `{other}` (discriminability | pyramid_layers)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeCfg {
    pub kind: Option<AnalysisKind>,
    pub probe_clips_per_video: usize,
    pub delta: usize,
}

impl Default for AnalyzeCfg {
    fn default() -> Self {
        Self {
            kind: None,
            probe_clips_per_video: 2,
            delta: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for model init and training (the dataset has its own
    /// `data.generator.seed`).
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Optional label-mode preset (`wo_dil0`, `wo_dil1`, `re1`, `re2`).
    pub head_preset: Option<String>,
    pub data: DataCfg,
    pub model: ModelCfg,
    pub train: TrainCfg,
    pub infer: InferCfg,
    pub ablate: AblateCfg,
    pub analyze: AnalyzeCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            head_preset: None,
            data: DataCfg::default(),
            model: ModelCfg::default(),
            train: TrainCfg::default(),
            infer: InferCfg::default(),
            ablate: AblateCfg::default(),
            analyze: AnalyzeCfg::default(),
        }
    }
}

impl RunConfig {
    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    /// Applies presets and the master seed, then validates everything.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(p) = &self.data.preset {
            self.data.generator.sparsity = sparsity_preset(p)?;
        }
        if let Some(p) = self.head_preset.clone() {
            apply_head_preset(&p, &mut self.model, &mut self.train)?;
        }
        self.set_seed(self.seed);
        self.validate()?;
        Ok(self)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        if self.data.generator.events_per_video() == 0 {
            return bad(format!(
                "data.generator: sparsity {} x video_length {} yields no events per video",
                self.data.generator.sparsity, self.data.generator.video_length
            ));
        }
        if self.model.num_classes != self.data.generator.num_classes {
            return bad(format!(
                "model.num_classes ({}) must equal data.generator.num_classes ({})",
                self.model.num_classes, self.data.generator.num_classes
            ));
        }
        if self.model.clip_len > self.data.generator.video_length {
            return bad("model.clip_len exceeds data.generator.video_length");
        }
        if self.data.train_videos == 0 || self.data.test_videos == 0 {
            return bad("data.train_videos and data.test_videos must be >= 1");
        }
        if self.data.early_stopping && self.data.val_videos == 0 {
            return bad("data.early_stopping needs data.val_videos >= 1");
        }
        if self.ablate.seeds == 0 {
            return bad("ablate.seeds must be >= 1");
        }
        if !self.infer.use_displacement && self.train.head_mode == tdeed::train::HeadMode::Displacement {
            return bad("infer.use_displacement = false needs train.head_mode = \"dilation\"");
        }
        Ok(())
    }

    /// Canonical JSON used for hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Parses `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override `{s}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return bad(format!("override `{s}` has an empty key segment"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = root;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return bad(format!("override path `{}` crosses a non-table key `{p}`", path.join("."))),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Parses a config document with overrides applied (unresolved).
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
    for o in overrides {
        let (path, v) = parse_override(o)?;
        set_path(&mut table, &path, v)?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, overrides)
        .and_then(RunConfig::resolve)
        .with_context(|| format!("in config {}", path.display()))
}

/// Exit code for an error chain: 2 for configuration errors, 3 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(tdeed::Error::Config(_)) = cause.downcast_ref::<tdeed::Error>() {
            return 2;
        }
    }
    3
}
