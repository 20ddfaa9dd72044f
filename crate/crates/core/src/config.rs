//! Run configuration shared by every CLI command.
//!
//! The file is TOML. Every section is optional and unknown keys are
//! rejected. Stage sections only need the keys that differ from the stage
//! defaults.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::analysis::CorrelogramConfig;
use crate::channel::{ChannelConfig, NoiseConfig, ShadowingConfig};
use crate::error::{RemError, Result};
use crate::featurize::LossSupport;
use crate::geometry::RangeArray;
use crate::io::{ingest_csv, GridRegion, MeasurementSet, SchemaMapping, DEFAULT_FILL, DEFAULT_RSRP_FLOOR_DBM};
use crate::kriging::KrigingConfig;
use crate::model::ModelConfig;
use crate::scenario::{aerial_world, sector_world, uptilt_world, Layout, Scenario};
use crate::training::{DirectionSampling, LossName, ScheduleName, StageConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeConfig {
    pub r_max: f64,
    pub step: f64,
}

impl Default for RangeConfig {
    fn default() -> Self {
        Self { r_max: 500.0, step: 1.0 }
    }
}

impl RangeConfig {
    pub fn to_range(&self) -> Result<RangeArray> {
        RangeArray::new(self.r_max, self.step)
    }
}

/// Built-in antenna worlds, so configs need not spell out gain tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldPreset {
    Isotropic,
    Sector,
    Uptilt,
    Aerial,
}

impl WorldPreset {
    /// The preset antenna with the transmit settings and shadowing of `base`.
    pub fn channel(self, base: &ChannelConfig, shadowing: Option<ShadowingConfig>) -> ChannelConfig {
        let antenna = match self {
            WorldPreset::Isotropic => ChannelConfig::default().antenna,
            WorldPreset::Sector => sector_world().antenna,
            WorldPreset::Uptilt => uptilt_world(None).antenna,
            WorldPreset::Aerial => aerial_world(None).antenna,
        };
        ChannelConfig { antenna, shadowing, ..base.clone() }
    }
}

/// Ground truth for `synth`. Without a `world` preset the `channel` section
/// is used; without `shadowing` the channel's shadowing is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub world: Option<WorldPreset>,
    pub shadowing: Option<ShadowingConfig>,
    pub noise: NoiseConfig,
    pub layout: Layout,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            world: None,
            shadowing: None,
            noise: NoiseConfig { sigma_db: 0.0 },
            layout: Layout::Slices { altitudes: vec![50.0, 70.0, 90.0, 110.0], per_slice: 250, radius: 250.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub schema: SchemaMapping,
    pub rsrp_floor_dbm: f64,
    /// Altitude labels to keep after ingestion; empty keeps everything.
    pub altitudes: Vec<String>,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self { schema: SchemaMapping::default(), rsrp_floor_dbm: DEFAULT_RSRP_FLOOR_DBM, altitudes: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridFormat {
    #[default]
    Binary,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    pub region: GridRegion,
    pub format: GridFormat,
    pub fill: f64,
}

impl Default for ExportSection {
    fn default() -> Self {
        Self {
            region: GridRegion { min: [-250.0, -250.0, 50.0], max: [250.0, 250.0, 110.0], cell: [10.0, 10.0, 20.0] },
            format: GridFormat::Binary,
            fill: DEFAULT_FILL,
        }
    }
}

/// Train / validation / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub ratios: [f64; 3],
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { ratios: [0.75, 0.05, 0.2] }
    }
}

/// Partial stage settings layered over the stage defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageOverrides {
    stage: Option<crate::training::Stage>,
    loss: Option<LossName>,
    lr_schedule: Option<ScheduleName>,
    lr_max: Option<f64>,
    lr_min: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    mask_ratio: Option<f64>,
    loss_support: Option<LossSupport>,
    warmup_frac: Option<f64>,
    n_drops: Option<usize>,
    smooth_l1_beta: Option<f64>,
    grad_clip: Option<f64>,
    val_fraction: Option<f64>,
    seed: Option<u64>,
}

impl StageOverrides {
    fn apply(self, mut s: StageConfig) -> StageConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { s.$f = v; } )* };
        }
        set!(stage, loss, lr_schedule, lr_max, lr_min, batch_size, epochs, mask_ratio, loss_support, warmup_frac, n_drops, smooth_l1_beta, grad_clip, val_fraction, seed);
        s
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    seed: Option<u64>,
    world: Option<WorldPreset>,
    #[serde(default)]
    channel: ChannelConfig,
    #[serde(default)]
    range: RangeConfig,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    directions: DirectionSampling,
    #[serde(default)]
    stage1: StageOverrides,
    #[serde(default)]
    stage2: StageOverrides,
    #[serde(default)]
    scenario: ScenarioSection,
    #[serde(default)]
    kriging: KrigingConfig,
    #[serde(default)]
    analysis: CorrelogramConfig,
    #[serde(default)]
    ingest: IngestSection,
    #[serde(default)]
    export: ExportSection,
    #[serde(default)]
    split: SplitSection,
    #[serde(default)]
    paths: PathsSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Fully resolved configuration. Serializes with every key present, and that
/// output parses back to an equal value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawRunConfig")]
pub struct RunConfig {
    pub seed: u64,
    /// Preset antenna for the `channel` section (the stage-1 world).
    pub world: Option<WorldPreset>,
    pub channel: ChannelConfig,
    pub range: RangeConfig,
    pub model: ModelConfig,
    pub directions: DirectionSampling,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub scenario: ScenarioSection,
    pub kriging: KrigingConfig,
    pub analysis: CorrelogramConfig,
    pub ingest: IngestSection,
    pub export: ExportSection,
    pub split: SplitSection,
    pub paths: PathsSection,
}

impl From<RawRunConfig> for RunConfig {
    fn from(r: RawRunConfig) -> Self {
        let seed = r.seed.unwrap_or(0);
        let mut stage1 = StageConfig { seed, ..StageConfig::pretrain() };
        let mut stage2 = StageConfig { seed, ..StageConfig::finetune() };
        stage1 = r.stage1.apply(stage1);
        stage2 = r.stage2.apply(stage2);
        RunConfig {
            seed,
            world: r.world,
            channel: r.channel,
            range: r.range,
            model: r.model,
            directions: r.directions,
            stage1,
            stage2,
            scenario: r.scenario,
            kriging: r.kriging,
            analysis: r.analysis,
            ingest: r.ingest,
            export: r.export,
            split: r.split,
            paths: r.paths,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RawRunConfig::default().into()
    }
}

impl RunConfig {
    /// Parses and validates; reports every violated key at once.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| RemError::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<RunConfig> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }

    /// Channel seen by stage-1 pretraining.
    pub fn pretrain_channel(&self) -> ChannelConfig {
        match self.world {
            Some(w) => w.channel(&self.channel, self.channel.shadowing),
            None => self.channel.clone(),
        }
    }

    /// Generator for synthetic measurements.
    pub fn scenario(&self) -> Scenario {
        let base = self.pretrain_channel();
        let shadowing = self.scenario.shadowing.or(base.shadowing);
        let world = match self.scenario.world {
            Some(w) => w.channel(&base, shadowing),
            None => ChannelConfig { shadowing, ..base },
        };
        Scenario { world, noise: self.scenario.noise, layout: self.scenario.layout.clone() }
    }

    /// Ingests a measurement file with the configured schema, floor and
    /// altitude selection.
    pub fn load_measurements(&self, path: impl AsRef<std::path::Path>) -> Result<MeasurementSet> {
        let m = ingest_csv(path, &self.ingest.schema, self.ingest.rsrp_floor_dbm)?;
        if self.ingest.altitudes.is_empty() {
            return Ok(m);
        }
        let labels: Vec<&str> = self.ingest.altitudes.iter().map(String::as_str).collect();
        m.with_labels(&labels)
    }

    /// Overrides every seed in the configuration.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
    }

    pub fn problems(&self) -> Vec<String> {
        let mut e = Vec::new();
        if let Err(RemError::Config(p)) = self.channel.validate() {
            e.extend(p);
        }
        if let Err(err) = self.range.to_range() {
            e.push(format!("range: {err}"));
        }
        e.extend(self.model.problems());
        if self.directions.count == 0 {
            e.push("directions.count must be >= 1".into());
        }
        e.extend(self.stage1.problems("stage1"));
        e.extend(self.stage2.problems("stage2"));
        e.extend(self.kriging.problems("kriging"));
        e.extend(self.analysis.problems("analysis"));
        e.extend(self.ingest.schema.problems("ingest.schema"));
        if self.ingest.rsrp_floor_dbm.is_nan() {
            e.push("ingest.rsrp_floor_dbm must be a number".into());
        }
        if let Err(err) = self.export.region.counts() {
            e.push(format!("export.region: {err}"));
        }
        if let Err(err) = crate::training::split_sizes(1, self.split.ratios) {
            e.push(format!("split.ratios: {err}"));
        }
        if let Some(sh) = &self.scenario.shadowing {
            e.extend(sh.problems().into_iter().map(|p| format!("scenario.{p}")));
        }
        if self.scenario.noise.sigma_db < 0.0 {
            e.push("scenario.noise.sigma_db must be >= 0".into());
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.problems();
        if e.is_empty() {
            Ok(())
        } else {
            Err(RemError::Config(e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.stage1.batch_size, 16);
        assert_eq!(c.stage2.batch_size, 4);
        assert_eq!(c.stage2.epochs, 100);
        assert_eq!(c.ingest.rsrp_floor_dbm, -120.0);
    }

    #[test]
    fn partial_stage_and_seed() {
        let c = RunConfig::from_toml("seed = 9\n[stage2]\nepochs = 3\n[range]\nr_max = 320\nstep = 5\n").unwrap();
        assert_eq!((c.stage2.epochs, c.stage2.lr_max, c.stage2.seed), (3, 5e-5, 9));
        assert_eq!(c.stage1.seed, 9);
        assert_eq!(c.range.to_range().unwrap().len(), 64);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::from_toml("[stage1]\nmask_ratio = 0.5\n[scenario.layout]\nkind = \"shell\"\ncount = 10\nrho_min = 5\nrho_max = 100\ntheta_max = 1.2\n").unwrap();
        c.channel.antenna = crate::scenario::sector_antenna();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn presets_resolve() {
        let c = RunConfig::from_toml(
            "world = \"sector\"\n[scenario]\nworld = \"uptilt\"\nshadowing = { sigma_db = 4.0, corr_length_m = 10.0, seed = 3 }\n",
        )
        .unwrap();
        assert_eq!(c.pretrain_channel(), sector_world());
        let sc = c.scenario();
        assert_eq!(sc.world.antenna, uptilt_world(None).antenna);
        assert_eq!(sc.world.shadowing.unwrap().sigma_db, 4.0);
        assert!(c.pretrain_channel().shadowing.is_none());
    }

    #[test]
    fn unknown_keys_and_all_problems_reported() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[model]\nd_modle = 3").is_err());
        let err = RunConfig::from_toml("[model]\nd_model = 10\nn_heads = 3\n[stage2]\nbatch_size = 0\n[kriging]\nneighborhood_k = 1\n")
            .unwrap_err();
        let RemError::Config(list) = err else { panic!("expected config error") };
        assert!(list.len() >= 3, "{list:?}");
        assert!(list.iter().any(|p| p.contains("stage2.batch_size")));
        assert!(list.iter().any(|p| p.contains("kriging.neighborhood_k")));
    }
}
