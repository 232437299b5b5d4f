//! Checkpoint directories and the on-disk checkpoint store.
//!
//! A checkpoint is a directory `update_NNNNNNNN/` holding, for each of
//! `actor`, `critic` and `ratio`, a matrix file (`<model>.bin`, see
//! [`crate::matfile`]) and a JSON sidecar (`<model>.json`), plus a
//! `state.json` with the update index and the metrics snapshot.
//!
//! Matrix names inside `<model>.bin`:
//!
//! | name                     | shape        |
//! |--------------------------|--------------|
//! | `layer{i}.weight`        | out × in     |
//! | `layer{i}.bias`          | 1 × out      |
//! | `adam.first_moment`      | 1 × n_params |
//! | `adam.second_moment`     | 1 × n_params |
//! | `normalization.mean`     | 1 × dim      |
//! | `normalization.std`      | 1 × dim      |
//!
//! Directories are written under a temporary name and renamed into place,
//! so a reader never sees a half-written checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use opposd_core::actor::{ActorModel, CheckpointSink, MetricsRow, TrainState};
use opposd_core::critic::CriticModel;
use opposd_core::data::NormalizationStats;
use opposd_core::nn::{AdamState, DenseMatrix, Head, Layer, MlpParams};
use opposd_core::ratio::{KernelConfig, RatioLossKind, RatioModel};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};
use crate::matfile::{self, MatrixSet};
use crate::metrics::MetricsWriter;

pub const FORMAT_VERSION: u64 = 1;
const PREFIX: &str = "update_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stability: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub format_version: u64,
    pub layer_sizes: Vec<usize>,
    pub head: Head,
    pub optimizer: OptimizerMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<RatioLossKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSidecar {
    pub format_version: u64,
    pub completed_updates: usize,
    pub metrics: MetricsRow,
}

/// Network, optimizer and input statistics of one model.
pub struct ModelParts<'a> {
    pub net: &'a MlpParams,
    pub optimizer: &'a AdamState,
    pub normalization: &'a NormalizationStats,
}

fn row_matrix(v: &[f64]) -> DenseMatrix {
    DenseMatrix::from_vec(1, v.len(), v.to_vec()).expect("row vector")
}

pub fn encode_model(parts: &ModelParts<'_>) -> Vec<u8> {
    let extra = [
        row_matrix(&parts.optimizer.first_moment),
        row_matrix(&parts.optimizer.second_moment),
        row_matrix(&parts.normalization.mean),
        row_matrix(&parts.normalization.std),
    ];
    let mut named = parts.net.named_matrices();
    for (name, m) in [
        "adam.first_moment",
        "adam.second_moment",
        "normalization.mean",
        "normalization.std",
    ]
    .into_iter()
    .zip(&extra)
    {
        named.push((name.to_string(), m));
    }
    matfile::encode(&named)
}

fn sidecar_for(parts: &ModelParts<'_>) -> ModelSidecar {
    let o = parts.optimizer;
    ModelSidecar {
        format_version: FORMAT_VERSION,
        layer_sizes: parts.net.layer_sizes().to_vec(),
        head: parts.net.head(),
        optimizer: OptimizerMeta {
            step_count: o.step_count,
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            eps_stability: o.eps_stability,
            weight_decay: o.weight_decay,
        },
        trainable: None,
        kernel: None,
        loss: None,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> LabResult<()> {
    fs::write(path, bytes).map_err(LabError::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> LabResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| LabError::format(path, e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> LabResult<T> {
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    serde_json::from_str(&text).map_err(|e| LabError::Parse {
        path: path.into(),
        line: e.line(),
        offset: line_offset(&text, e.line()) + e.column().saturating_sub(1),
        message: e.to_string(),
    })
}

/// Byte offset of the start of 1-based `line` within `text`.
pub(crate) fn line_offset(text: &str, line: usize) -> usize {
    text.split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum()
}

fn write_model(dir: &Path, stem: &str, parts: &ModelParts<'_>, sidecar: &ModelSidecar) -> LabResult<()> {
    write_file(&dir.join(format!("{stem}.bin")), &encode_model(parts))?;
    write_json(&dir.join(format!("{stem}.json")), sidecar)
}

struct LoadedModel {
    net: MlpParams,
    optimizer: AdamState,
    normalization: NormalizationStats,
    sidecar: ModelSidecar,
}

fn read_model(dir: &Path, stem: &str) -> LabResult<LoadedModel> {
    let json_path = dir.join(format!("{stem}.json"));
    let sidecar: ModelSidecar = read_json(&json_path)?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(LabError::UnsupportedVersion {
            path: json_path,
            found: sidecar.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let set = MatrixSet::read(&dir.join(format!("{stem}.bin")))?;
    let sizes = &sidecar.layer_sizes;
    if sizes.len() < 2 {
        return Err(LabError::format(&json_path, "layer_sizes needs at least two entries"));
    }
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    for i in 0..sizes.len() - 1 {
        let weight = set.get(&format!("layer{i}.weight"))?.clone();
        let bias = set.get(&format!("layer{i}.bias"))?.clone();
        if weight.rows() != sizes[i + 1] || weight.cols() != sizes[i] {
            return Err(LabError::format(
                set.path(),
                format!("layer{i}.weight is {}x{}, sidecar says {}x{}", weight.rows(), weight.cols(), sizes[i + 1], sizes[i]),
            ));
        }
        layers.push(Layer { weight, bias });
    }
    let net = MlpParams::from_layers(layers, sidecar.head)?;
    let n = net.n_params();
    let dim = sizes[0];
    let o = &sidecar.optimizer;
    let optimizer = AdamState {
        step_count: o.step_count,
        first_moment: set.vector("adam.first_moment", n)?,
        second_moment: set.vector("adam.second_moment", n)?,
        learning_rate: o.learning_rate,
        beta1: o.beta1,
        beta2: o.beta2,
        eps_stability: o.eps_stability,
        weight_decay: o.weight_decay,
    };
    let normalization = NormalizationStats {
        mean: set.vector("normalization.mean", dim)?,
        std: set.vector("normalization.std", dim)?,
    };
    Ok(LoadedModel {
        net,
        optimizer,
        normalization,
        sidecar,
    })
}

/// Name of the checkpoint directory for `update`.
pub fn checkpoint_name(update: usize) -> String {
    format!("{PREFIX}{update:08}")
}

fn parse_checkpoint_name(name: &str) -> Option<usize> {
    let digits = name.strip_prefix(PREFIX)?;
    if digits.len() == 8 && digits.bytes().all(|b| b.is_ascii_digit()) {
        digits.parse().ok()
    } else {
        None
    }
}

/// Writes `state` as a new checkpoint directory under `root`. Fails if it
/// already exists.
pub fn write_checkpoint(root: &Path, state: &TrainState, metrics: &MetricsRow) -> LabResult<PathBuf> {
    let final_dir = root.join(checkpoint_name(state.completed_updates));
    if final_dir.exists() {
        return Err(LabError::AlreadyExists { path: final_dir });
    }
    let tmp = root.join(format!(".{}.tmp", checkpoint_name(state.completed_updates)));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(LabError::io(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(LabError::io(&tmp))?;

    let actor = ModelParts {
        net: &state.actor.net,
        optimizer: &state.actor.optimizer,
        normalization: &state.actor.normalization,
    };
    let mut sidecar = sidecar_for(&actor);
    sidecar.trainable = state.actor.trainable.clone();
    write_model(&tmp, "actor", &actor, &sidecar)?;

    let critic = ModelParts {
        net: &state.critic.net,
        optimizer: &state.critic.optimizer,
        normalization: &state.critic.normalization,
    };
    write_model(&tmp, "critic", &critic, &sidecar_for(&critic))?;

    let ratio = ModelParts {
        net: &state.ratio.net,
        optimizer: &state.ratio.optimizer,
        normalization: &state.ratio.normalization,
    };
    let mut sidecar = sidecar_for(&ratio);
    sidecar.kernel = Some(state.ratio.kernel);
    sidecar.loss = Some(state.ratio.loss);
    write_model(&tmp, "ratio", &ratio, &sidecar)?;

    write_json(
        &tmp.join("state.json"),
        &StateSidecar {
            format_version: FORMAT_VERSION,
            completed_updates: state.completed_updates,
            metrics: metrics.clone(),
        },
    )?;
    fs::rename(&tmp, &final_dir).map_err(LabError::io(&final_dir))?;
    Ok(final_dir)
}

/// Loads a checkpoint directory written by [`write_checkpoint`].
pub fn read_checkpoint(dir: &Path) -> LabResult<(TrainState, MetricsRow)> {
    let state_path = dir.join("state.json");
    let meta: StateSidecar = read_json(&state_path)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(LabError::UnsupportedVersion {
            path: state_path,
            found: meta.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let a = read_model(dir, "actor")?;
    let mut actor = ActorModel::from_net(a.net, a.optimizer.learning_rate, a.normalization, a.sidecar.trainable)?;
    actor.optimizer = a.optimizer;

    let c = read_model(dir, "critic")?;
    let critic = CriticModel {
        net: c.net,
        optimizer: c.optimizer,
        normalization: c.normalization,
    };

    let r = read_model(dir, "ratio")?;
    let ratio_json = dir.join("ratio.json");
    let kernel = r
        .sidecar
        .kernel
        .ok_or_else(|| LabError::format(&ratio_json, "missing `kernel`"))?;
    let loss = r
        .sidecar
        .loss
        .ok_or_else(|| LabError::format(&ratio_json, "missing `loss`"))?;
    let ratio = RatioModel {
        net: r.net,
        optimizer: r.optimizer,
        normalization: r.normalization,
        kernel,
        loss,
    };
    Ok((
        TrainState {
            actor,
            critic,
            ratio,
            completed_updates: meta.completed_updates,
        },
        meta.metrics,
    ))
}

/// Checkpoint directories under `root`, sorted by update index.
pub fn list_checkpoints(root: &Path) -> LabResult<Vec<(usize, PathBuf)>> {
    let entries = match fs::read_dir(root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(LabError::MissingCheckpoints { dir: root.into() })
        }
        Err(e) => return Err(LabError::io(root)(e)),
    };
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(LabError::io(root))?;
        if let Some(u) = entry.file_name().to_str().and_then(parse_checkpoint_name) {
            if entry.path().is_dir() {
                out.push((u, entry.path()));
            }
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(LabError::MissingCheckpoints { dir: root.into() });
    }
    Ok(out)
}

/// Checkpoint sink writing to `<dir>/checkpoints` and `<dir>/metrics.csv`.
pub struct DiskStore {
    checkpoints: PathBuf,
    metrics: MetricsWriter,
    last: Option<usize>,
}

impl DiskStore {
    /// `dir` must be a fresh run directory.
    pub fn create(dir: &Path, metrics_comment: &str) -> LabResult<Self> {
        let checkpoints = dir.join("checkpoints");
        fs::create_dir_all(&checkpoints).map_err(LabError::io(&checkpoints))?;
        let metrics = MetricsWriter::create(&dir.join("metrics.csv"), metrics_comment)?;
        Ok(DiskStore {
            checkpoints,
            metrics,
            last: None,
        })
    }

    pub fn checkpoint_dir(&self) -> &Path {
        &self.checkpoints
    }
}

fn sink_err(e: LabError) -> opposd_core::Error {
    opposd_core::Error::Sink(e.to_string())
}

impl CheckpointSink for DiskStore {
    fn record_metrics(&mut self, row: &MetricsRow) -> opposd_core::Result<()> {
        self.metrics.write(row).map_err(sink_err)
    }

    fn save(&mut self, state: &TrainState, metrics: &MetricsRow) -> opposd_core::Result<()> {
        if let Some(last) = self.last {
            if state.completed_updates <= last {
                return Err(opposd_core::Error::Sink(format!(
                    "checkpoint {} is not after {last}",
                    state.completed_updates
                )));
            }
        }
        write_checkpoint(&self.checkpoints, state, metrics).map_err(sink_err)?;
        self.last = Some(state.completed_updates);
        Ok(())
    }
}
