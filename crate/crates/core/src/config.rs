//! Pipeline configuration: one TOML file drives all five commands.
//!
//! The schema is strict — unknown keys are rejected everywhere — and every
//! random choice in the pipeline traces back to a seed written in the file
//! (campaign master seed, index level seed, training seed). There is no
//! environment-variable configuration: two runs from the same file and the
//! same inputs must be the same run.
//!
//! The config is also the single naming authority for pipeline artifacts:
//! grid-cell file names come from [`GridCell::slug`] via the path helpers
//! here, so the five commands agree on where a cell's dataset and weights
//! live.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DataPair;
use crate::error::{Error, Result};
use crate::neural::{NetSpec, TrainConfig};
use crate::osd::{estimate_state_metric, BuildOptions, HnswKnobs, OsdParams, StateMetric};
use crate::scenario::CampaignConfig;

/// One (J*, S_u) point of the distillation grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub j_star: f64,
    pub s_u: f64,
}

impl GridCell {
    pub fn new(j_star: f64, s_u: f64) -> Self {
        GridCell { j_star, s_u }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.j_star.is_finite() && self.j_star > 0.0) {
            return Err(Error::InvalidParams(format!(
                "grid cell j_star must be finite and positive, got {}",
                self.j_star
            )));
        }
        if !(self.s_u.is_finite() && self.s_u >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "grid cell s_u must be finite and nonnegative, got {}",
                self.s_u
            )));
        }
        Ok(())
    }

    /// File-name fragment, e.g. `j0.25-su0.0025`. Plain decimal `Display` of
    /// both knobs keeps the names readable and collision-free for distinct
    /// cells.
    pub fn slug(&self) -> String {
        format!("j{}-su{}", self.j_star, self.s_u)
    }

    /// Cost parameters for this cell under the given state metric.
    pub fn params(&self, s_x: StateMetric) -> Result<OsdParams> {
        OsdParams::new(self.j_star, s_x, self.s_u)
    }
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(J*={}, S_u={})", self.j_star, self.s_u)
    }
}

/// How the state metric of the pairwise cost is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricChoice {
    /// Unweighted squared Euclidean distance on the raw state coordinates.
    Identity,
    /// Inverse regularized covariance of the raw dataset (whitening), so all
    /// state directions contribute at comparable scale.
    Mahalanobis,
}

/// Distillation settings: the (J*, S_u) grid and the index/build knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OsdSection {
    /// Separation thresholds; one dataset is built per (j_star, s_u) pair.
    pub grid_j_star: Vec<f64>,
    pub grid_s_u: Vec<f64>,
    pub state_metric: MetricChoice,
    /// Trailing-window length for the saturation statistics.
    pub saturation_window: usize,
    pub hnsw: HnswKnobs,
}

impl OsdSection {
    /// The full cell grid, row-major in (j_star, s_u) order.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::with_capacity(self.grid_j_star.len() * self.grid_s_u.len());
        for &j in &self.grid_j_star {
            for &s in &self.grid_s_u {
                out.push(GridCell::new(j, s));
            }
        }
        out
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            hnsw: self.hnsw.clone(),
            saturation_window: self.saturation_window,
        }
    }

    /// Resolve the configured state metric against the raw records.
    pub fn metric(&self, records: &[DataPair]) -> Result<StateMetric> {
        match self.state_metric {
            MetricChoice::Identity => Ok(StateMetric::identity()),
            MetricChoice::Mahalanobis => estimate_state_metric(records),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_j_star.is_empty() || self.grid_s_u.is_empty() {
            return Err(Error::InvalidParams("distillation grid must be nonempty".into()));
        }
        for cell in self.cells() {
            cell.validate()?;
        }
        for (axis, vals) in [("grid_j_star", &self.grid_j_star), ("grid_s_u", &self.grid_s_u)] {
            for (i, a) in vals.iter().enumerate() {
                if vals[i + 1..].contains(a) {
                    return Err(Error::InvalidParams(format!(
                        "{axis} has a duplicate entry {a}; cell file names would collide"
                    )));
                }
            }
        }
        if self.saturation_window == 0 {
            return Err(Error::InvalidParams("saturation_window must be at least 1".into()));
        }
        self.hnsw.validate()
    }
}

/// Which datasets get a surrogate and under what optimizer budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Grid cells to train on; each must be part of the distillation grid.
    pub cells: Vec<GridCell>,
    /// Also train on the undistilled stream under the same step budget.
    pub include_raw: bool,
    pub net: NetSpec,
    pub optimizer: TrainConfig,
}

impl TrainSection {
    pub fn validate(&self, grid: &OsdSection) -> Result<()> {
        if self.cells.is_empty() && !self.include_raw {
            return Err(Error::InvalidParams("training section selects no datasets".into()));
        }
        let all = grid.cells();
        for cell in &self.cells {
            cell.validate()?;
            if !all.contains(cell) {
                return Err(Error::InvalidParams(format!(
                    "training cell {cell} is not part of the distillation grid"
                )));
            }
        }
        self.net.validate()?;
        self.optimizer.validate()?;
        if self.optimizer.max_steps.is_none() {
            return Err(Error::InvalidParams(
                "optimizer.max_steps must be set: the explicit gradient-step budget is what \
                 makes runs comparable across datasets"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Held-out comparison settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Cell at which the common test set is distilled from the raw stream
    /// (training members removed). Need not be part of the build grid.
    pub test_cell: GridCell,
    /// Action-gap tolerance when verifying built datasets: a record whose
    /// nearest centroid disagrees by more than this counts as a violation.
    pub u_tol: f64,
    /// Lowest acceptable coverage fraction when verifying built datasets.
    pub min_coverage: f64,
    /// States timed when comparing controller latency against the surrogate.
    pub timing_states: usize,
}

impl EvalSection {
    pub fn validate(&self) -> Result<()> {
        self.test_cell.validate()?;
        if !(self.u_tol.is_finite() && self.u_tol >= 0.0) {
            return Err(Error::InvalidParams("u_tol must be finite and nonnegative".into()));
        }
        if !(self.min_coverage > 0.0 && self.min_coverage <= 1.0) {
            return Err(Error::InvalidParams("min_coverage must sit in (0, 1]".into()));
        }
        if self.timing_states == 0 {
            return Err(Error::InvalidParams("timing_states must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where the pipeline reads and writes its artifacts. Relative paths are
/// resolved against the process working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// The simulated state→action stream (output of `simulate`).
    pub raw_dataset: PathBuf,
    /// Directory of distilled per-cell datasets.
    pub osd_dir: PathBuf,
    /// Directory of trained weight files.
    pub weights_dir: PathBuf,
    /// Directory of manifests and reports.
    pub reports_dir: PathBuf,
}

impl PathsSection {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("raw_dataset", &self.raw_dataset),
            ("osd_dir", &self.osd_dir),
            ("weights_dir", &self.weights_dir),
            ("reports_dir", &self.reports_dir),
        ] {
            if p.as_os_str().is_empty() {
                return Err(Error::InvalidParams(format!("paths.{name} must not be empty")));
            }
        }
        Ok(())
    }
}

/// The whole pipeline in one file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub campaign: CampaignConfig,
    pub osd: OsdSection,
    pub train: TrainSection,
    pub evaluation: EvalSection,
    pub paths: PathsSection,
}

impl PipelineConfig {
    /// Desk-scale defaults: the shipped configuration. A 1.44e6-record
    /// campaign, the four-by-four distillation grid, surrogates for one
    /// J* at both ends of the action-weight range plus the raw baseline,
    /// and a finer common test cell.
    pub fn desk_default() -> Self {
        PipelineConfig {
            campaign: CampaignConfig::desk_default(1729),
            osd: OsdSection {
                grid_j_star: vec![1.0, 0.5, 0.25, 0.1],
                grid_s_u: vec![0.0, 1e-4, 2.5e-3, 1e-2],
                state_metric: MetricChoice::Mahalanobis,
                saturation_window: 10_000,
                hnsw: HnswKnobs::default(),
            },
            train: TrainSection {
                cells: vec![GridCell::new(0.5, 0.0), GridCell::new(0.5, 0.01)],
                include_raw: true,
                net: NetSpec::resnet(12, 16),
                optimizer: TrainConfig {
                    batch: 256,
                    lr: 2e-3,
                    epochs: 100_000,
                    max_steps: Some(20_000),
                    seed: 93,
                    ..TrainConfig::default()
                },
            },
            evaluation: EvalSection {
                // Finer state resolution and the top action weight: the test
                // set probes below the training cells' granularity.
                test_cell: GridCell::new(0.1, 0.01),
                u_tol: 0.0,
                min_coverage: 0.999,
                timing_states: 200,
            },
            paths: PathsSection {
                raw_dataset: PathBuf::from("artifacts/raw.osd1"),
                osd_dir: PathBuf::from("artifacts/osd"),
                weights_dir: PathBuf::from("artifacts/weights"),
                reports_dir: PathBuf::from("artifacts/reports"),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.campaign.validate()?;
        self.osd.validate()?;
        self.train.validate(&self.osd)?;
        self.evaluation.validate()?;
        self.paths.validate()
    }

    /// Parse and validate.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("reading config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }

    /// Distilled dataset path for one grid cell.
    pub fn osd_path(&self, cell: &GridCell) -> PathBuf {
        self.paths.osd_dir.join(format!("osd-{}.osd1", cell.slug()))
    }

    /// Weights path for the surrogate trained on one grid cell.
    pub fn weights_path(&self, cell: &GridCell) -> PathBuf {
        self.paths.weights_dir.join(format!("net-{}.nnw1", cell.slug()))
    }

    /// Weights path for the raw-stream surrogate.
    pub fn raw_weights_path(&self) -> PathBuf {
        self.paths.weights_dir.join("net-raw.nnw1")
    }
}
