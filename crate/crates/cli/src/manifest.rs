//! Run manifests: what a command read, what it wrote, and the stage summary.
//!
//! A manifest must be byte-for-byte reproducible for identical inputs and
//! config, so it records paths exactly as configured (relative, not
//! canonicalized) and carries no timestamps or durations — those live in the
//! wall-time sidecar.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use nnmpc_core::dataset::file_sha256;
use nnmpc_core::error::{Error, Result};
use nnmpc_core::evaluation::ErrorReport;
use nnmpc_core::neural::{Footprint, TrainLog};
use nnmpc_core::osd::{SaturationStats, VerificationReport};
use nnmpc_core::scenario::CampaignReport;

/// Identity of one file at the time the command ran.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileStamp {
    /// Path exactly as configured or passed, relative to the working
    /// directory of the run.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

impl FileStamp {
    pub fn of(path: &Path) -> Result<Self> {
        let meta = fs::metadata(path)?;
        Ok(FileStamp {
            path: path.to_string_lossy().into_owned(),
            bytes: meta.len(),
            sha256: file_sha256(path)?,
        })
    }
}

/// One grid cell's build outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellBuild {
    pub j_star: f64,
    pub s_u: f64,
    pub file: String,
    pub n_raw: usize,
    pub n_d: usize,
    /// Running max action gap recorded while filtering.
    pub build_us: f64,
    /// Trailing rejection ratio when the stream ended.
    pub end_rejection_ratio: f64,
    /// Mann–Kendall trend statistic over the rejection-ratio history;
    /// positive means the stream was still saturating as it ended.
    pub trend_z: f64,
    pub saturation: SaturationStats,
}

/// One grid cell's verification outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellVerify {
    pub j_star: f64,
    pub s_u: f64,
    pub file: String,
    /// Whether the exhaustive-scan engine was forced (`--verify-exact`).
    pub exact: bool,
    pub verification: VerificationReport,
}

/// One trained surrogate.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetTrain {
    /// `raw` or the grid-cell slug.
    pub name: String,
    pub file: String,
    /// Training records available to this net.
    pub records: usize,
    pub log: TrainLog,
}

/// One surrogate's held-out errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetEval {
    pub name: String,
    pub file: String,
    pub error: ErrorReport,
}

/// Deployment accounting that does not depend on the machine: sizes and
/// dimensions only. Measured latencies go to the wall sidecar.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticFootprint {
    pub net: Footprint,
    pub weights_file_bytes: u64,
    pub qp_variables: usize,
    pub qp_constraint_rows: usize,
    pub kkt_dimension: usize,
    pub qp_kkt_ram_bytes: usize,
}

/// The evaluate stage summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSummary {
    pub test_j_star: f64,
    pub test_s_u: f64,
    /// Where the test set came from: a built grid cell or a fresh build.
    pub test_source: String,
    pub test_records: usize,
    /// Test records dropped because they also appear in a training set.
    pub overlap_removed: usize,
    pub nets: Vec<NetEval>,
    pub footprint: StaticFootprint,
}

/// What one command run read, wrote, and concluded. Exactly one stage
/// section is populated.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// SHA-256 of the config file bytes the run was started from.
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_override: Option<u64>,
    pub inputs: Vec<FileStamp>,
    pub outputs: Vec<FileStamp>,
    /// Column-major 8x8 state metric the grid was built with, recorded so
    /// verification and evaluation reuse the build-time geometry verbatim
    /// even when handed a different raw sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_metric: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<CampaignReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub build: Option<Vec<CellBuild>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<Vec<CellVerify>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<Vec<NetTrain>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateSummary>,
}

impl RunManifest {
    pub fn new(command: &str, config_sha256: &str, seed_override: Option<u64>) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256: config_sha256.to_string(),
            seed_override,
            inputs: Vec::new(),
            outputs: Vec::new(),
            state_metric: None,
            simulate: None,
            build: None,
            verify: None,
            train: None,
            evaluate: None,
        }
    }

    /// `manifest-<command>.toml` inside the reports directory.
    pub fn path_for(reports_dir: &Path, command: &str) -> std::path::PathBuf {
        reports_dir.join(format!("manifest-{command}.toml"))
    }

    pub fn save(&self, reports_dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest encode: {e}")))?;
        fs::create_dir_all(reports_dir)?;
        fs::write(Self::path_for(reports_dir, &self.command), text)?;
        Ok(())
    }

    pub fn load(reports_dir: &Path, command: &str) -> Result<Self> {
        let path = Self::path_for(reports_dir, command);
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!(
                "reading {} (run `nnmpc {command}` first): {e}",
                path.display()
            ))
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("manifest parse: {e}")))
    }

    /// The recorded output stamp for `path`, if any.
    pub fn output_stamp(&self, path: &str) -> Option<&FileStamp> {
        self.outputs.iter().find(|s| s.path == path)
    }

    /// The recorded input stamp for `path`, if any.
    pub fn input_stamp(&self, path: &str) -> Option<&FileStamp> {
        self.inputs.iter().find(|s| s.path == path)
    }
}

/// Durations and measured latencies, kept out of the deterministic manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallReport {
    pub command: String,
    pub total_s: f64,
    pub stages: Vec<StageTime>,
}

/// One named measurement. Seconds unless the name says otherwise.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTime {
    pub name: String,
    pub value: f64,
}

impl WallReport {
    pub fn new(command: &str) -> Self {
        WallReport {
            command: command.to_string(),
            total_s: 0.0,
            stages: Vec::new(),
        }
    }

    pub fn stage(&mut self, name: impl Into<String>, value: f64) {
        self.stages.push(StageTime {
            name: name.into(),
            value,
        });
    }

    pub fn save(&self, reports_dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("wall report encode: {e}")))?;
        fs::create_dir_all(reports_dir)?;
        fs::write(reports_dir.join(format!("wall-{}.toml", self.command)), text)?;
        Ok(())
    }
}
