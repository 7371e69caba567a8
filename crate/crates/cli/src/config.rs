//! Experiment configuration files (TOML) and exit-code classification.

use std::path::{Path, PathBuf};

use bdl_core::bootstrap::{
    CalibrationConfig, PipelineConfig, ResidualMode, ResidualTrainConfig, ViewGroupConfig, ViewGroupKind, WeightSharing,
};
use bdl_core::bounds::{BoundInputs, BoundParam, CoveringParams};
use bdl_core::diffusion::SamplerKind;
use bdl_core::evalkit::EvalConfig;
use bdl_core::linops::GridShape;
use bdl_core::neural::{Activation, NetConfig, OptimizerConfig, TrainConfig};
use bdl_core::synthdata::DeskSpecParams;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const DATA_DIR_ENV: &str = "BDL_DATA_DIR";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Acceptance(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Acceptance(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Acceptance(m) => write!(f, "acceptance failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn is_numeric(e: &bdl_core::Error) -> bool {
    use bdl_core::Error as E;
    match e {
        E::Numerical(_) | E::Divergence { .. } => true,
        E::Stage { source, .. } => is_numeric(source),
        _ => false,
    }
}

impl From<bdl_core::Error> for CliError {
    fn from(e: bdl_core::Error) -> Self {
        if is_numeric(&e) {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Sampler settings for `bdl sample`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub count: usize,
    pub steps: usize,
    pub kind: SamplerKind,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            count: 16,
            steps: 32,
            kind: SamplerKind::Heun,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub param: BoundParam,
    pub values: Vec<f64>,
}

/// Inputs of `bdl bounds`. `log_cover` wins over `covering` when both are set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub inputs: BoundInputs,
    #[serde(default)]
    pub log_cover: Option<f64>,
    #[serde(default)]
    pub covering: Option<CoveringParams>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

impl BoundsConfig {
    /// The worked example row with a zero covering term.
    pub fn worked_row() -> Self {
        Self {
            inputs: BoundInputs {
                n: 100.0,
                k: 1.0,
                m: 1.0,
                u: 1.0,
                delta_b: 0.1,
                delta_v: 1.0,
                rho: 1.0,
                gamma: 1.0,
                epsilon: 0.05,
                ev: 1.0,
                rademacher: 0.05,
            },
            log_cover: Some(0.0),
            covering: None,
            sweep: None,
        }
    }

    pub fn log_cover(&self) -> CliResult<f64> {
        match (self.log_cover, &self.covering) {
            (Some(v), _) => Ok(v),
            (None, Some(c)) => Ok(bdl_core::bounds::log_covering_bound(c)?),
            (None, None) => Ok(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output directory; `--data-dir` and `BDL_DATA_DIR` take precedence.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub bounds: Option<BoundsConfig>,
}

pub fn adam(epochs: usize, batch: usize, lr: f64, seed: u64) -> TrainConfig {
    let mut t = TrainConfig::new(epochs, batch, seed);
    t.optimizer = OptimizerConfig::Adam {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    t
}

/// Desk-scale settings shared by the default config and the acceptance runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeskBudget {
    pub view_epochs: usize,
    pub residual_epochs: usize,
    pub patch_images: usize,
    pub down_images: usize,
    pub width: usize,
    pub lambda: f64,
}

impl Default for DeskBudget {
    fn default() -> Self {
        Self {
            view_epochs: 30,
            residual_epochs: 1000,
            patch_images: 320,
            down_images: 5000,
            width: 256,
            lambda: 1.0,
        }
    }
}

/// 32×32 grid, sixteen 8×8 patches plus a ÷4 downsample, `N₀ = 64`.
pub fn desk_pipeline(global_strength: f64, seed: u64, budget: &DeskBudget) -> PipelineConfig {
    let net = NetConfig {
        hidden: vec![budget.width, budget.width],
        activation: Activation::Silu,
    };
    let view_train = adam(budget.view_epochs, 128, 1e-3, seed);
    PipelineConfig {
        spec: DeskSpecParams::new(GridShape::square(32), 8, global_strength, seed),
        schedule: None,
        n0: 64,
        views: vec![
            ViewGroupConfig {
                id: "patch".into(),
                kind: ViewGroupKind::PatchTiling { patch: 8 },
                images: budget.patch_images,
                net: net.clone(),
                train: view_train.clone(),
            },
            ViewGroupConfig {
                id: "down".into(),
                kind: ViewGroupKind::Downsample { factor: 4 },
                images: budget.down_images,
                net: net.clone(),
                train: view_train,
            },
        ],
        duplicate_fraction: 0.0,
        calibration: CalibrationConfig {
            samples: 256,
            per_bin: 8,
            ridge: 1e-6,
            on_s0: false,
            sharing: WeightSharing::PerGroup,
        },
        residual: Some(ResidualTrainConfig {
            lambda: budget.lambda,
            hard_cap: None,
            mode: ResidualMode::Penalty,
            train: adam(budget.residual_epochs, 64, 2e-3, seed),
            net,
            cap_draws: 4,
        }),
        seed,
    }
}

impl ExperimentConfig {
    pub fn desk_default(seed: u64) -> Self {
        Self {
            output_dir: None,
            pipeline: desk_pipeline(0.3, seed, &DeskBudget::default()),
            eval: EvalConfig {
                bins: 10,
                per_bin: 30,
                seed,
            },
            sample: SampleConfig::default(),
            bounds: Some(BoundsConfig::worked_row()),
        }
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        self.pipeline.validate()?;
        if self.eval.bins == 0 || self.eval.per_bin == 0 {
            return Err(CliError::Config("eval.bins and eval.per_bin must be positive".into()));
        }
        if self.sample.count == 0 || self.sample.steps == 0 {
            return Err(CliError::Config("sample.count and sample.steps must be positive".into()));
        }
        if let Some(b) = &self.bounds {
            b.inputs.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// Writes the resolved configuration next to the outputs.
    pub fn write_resolved(&self, dir: &Path) -> CliResult<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

/// Applies `key.path=value` overrides to TOML text. Array elements are
/// addressed by index (`pipeline.views.0.images=100`); values parse as TOML
/// and fall back to bare strings.
pub fn apply_overrides(text: &str, overrides: &[String]) -> CliResult<String> {
    if overrides.is_empty() {
        return Ok(text.to_string());
    }
    let mut root: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {o:?} is not KEY=VALUE")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut cur = &mut root;
        for (i, part) in parts.iter().enumerate() {
            let last = i + 1 == parts.len();
            cur = match cur {
                toml::Value::Table(t) => {
                    if last {
                        t.insert(part.to_string(), value.clone());
                        break;
                    }
                    t.entry(part.to_string())
                        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                }
                toml::Value::Array(a) => {
                    let idx: usize = part
                        .parse()
                        .map_err(|_| CliError::Config(format!("override {key:?}: {part:?} is not an index")))?;
                    let len = a.len();
                    let slot = a
                        .get_mut(idx)
                        .ok_or_else(|| CliError::Config(format!("override {key:?}: index {idx} out of {len}")))?;
                    if last {
                        *slot = value.clone();
                        break;
                    }
                    slot
                }
                _ => return Err(CliError::Config(format!("override {key:?}: {part:?} is not a table"))),
            };
        }
    }
    toml::to_string(&root).map_err(|e| CliError::Config(e.to_string()))
}

/// `--data-dir`, then `BDL_DATA_DIR`, then the config's `output_dir`, then `bdl-out`.
pub fn resolve_data_dir(flag: Option<&Path>, cfg: Option<&ExperimentConfig>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.and_then(|c| c.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("bdl-out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::desk_default(3);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::desk_default(1).to_toml().unwrap();
        text = text.replacen("[pipeline]\n", "[pipeline]\nbogus = 1\n", 1);
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn errors_classify_into_exit_codes() {
        let e: CliError = bdl_core::Error::Numerical("x".into()).in_stage("residual").into();
        assert_eq!(e.exit_code(), 3);
        let e: CliError = bdl_core::Error::Config("x".into()).into();
        assert_eq!(e.exit_code(), 2);
        assert_eq!(CliError::Acceptance("x".into()).exit_code(), 4);
    }

    #[test]
    fn overrides_reach_nested_and_array_keys() {
        let text = ExperimentConfig::desk_default(1).to_toml().unwrap();
        let out = apply_overrides(
            &text,
            &["pipeline.n0=32".into(), "pipeline.views.1.images=100".into(), "eval.bins=4".into()],
        )
        .unwrap();
        let cfg = ExperimentConfig::parse(&out).unwrap();
        assert_eq!(cfg.pipeline.n0, 32);
        assert_eq!(cfg.pipeline.views[1].images, 100);
        assert_eq!(cfg.eval.bins, 4);
        assert_eq!(apply_overrides(&text, &["nokey".into()]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn explicit_data_dir_wins() {
        let cfg = ExperimentConfig {
            output_dir: Some("from-config".into()),
            ..ExperimentConfig::desk_default(1)
        };
        assert_eq!(resolve_data_dir(Some(Path::new("flag")), Some(&cfg)), PathBuf::from("flag"));
    }
}
