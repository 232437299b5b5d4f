//! JSON-lines dataset files.
//!
//! Line 1 is the header:
//!
//! ```json
//! {"version":1,"horizon":200,"n_actions":2,"state_dim":4,"epsilon":0.0,
//!  "n_trajectories":500,"normalization":{"mean":[...],"std":[...]}}
//! ```
//!
//! Each following line is one trajectory, `{"transitions":[...]}`, with
//! every transition carrying `state`, `action`, `reward`, `next_state`,
//! `behavior_prob`, `timestep`, `provenance` (`logged`, `injected` or
//! `absorbing_loop`), `done` and `padded`. Every line ends in `\n`. Reals
//! are shortest round-trip decimals, so save then load is bit-exact.

use std::fs;
use std::path::Path;

use opposd_core::data::{Dataset, NormalizationStats, Trajectory};
use serde::{Deserialize, Serialize};

use crate::checkpoint::line_offset;
use crate::error::{LabError, LabResult};

pub const DATASET_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u64,
    pub horizon: usize,
    pub n_actions: usize,
    pub state_dim: usize,
    pub epsilon: f64,
    pub n_trajectories: usize,
    pub normalization: NormalizationStats,
}

#[derive(Serialize)]
struct TrajectoryRef<'a> {
    transitions: &'a [opposd_core::data::Transition],
}

pub fn encode_dataset(ds: &Dataset) -> LabResult<String> {
    let header = DatasetHeader {
        version: DATASET_VERSION,
        horizon: ds.horizon,
        n_actions: ds.n_actions,
        state_dim: ds.state_dim,
        epsilon: ds.smoothing_epsilon,
        n_trajectories: ds.trajectories.len(),
        normalization: ds.normalization.clone(),
    };
    let json = |e: serde_json::Error| LabError::format("<dataset>", e.to_string());
    let mut out = serde_json::to_string(&header).map_err(json)?;
    out.push('\n');
    for t in &ds.trajectories {
        out.push_str(&serde_json::to_string(&TrajectoryRef { transitions: &t.transitions }).map_err(json)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes a new file; refuses to replace an existing one.
pub fn save_dataset(ds: &Dataset, path: &Path) -> LabResult<()> {
    ds.validate()?;
    if path.exists() {
        return Err(LabError::AlreadyExists { path: path.into() });
    }
    let text = encode_dataset(ds)?;
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, text).map_err(LabError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(LabError::io(path))
}

pub fn load_dataset(path: &Path) -> LabResult<Dataset> {
    let bytes = fs::read(path).map_err(LabError::io(path))?;
    let text = String::from_utf8(bytes).map_err(|e| LabError::Parse {
        path: path.into(),
        line: 0,
        offset: e.utf8_error().valid_up_to(),
        message: "file is not UTF-8".into(),
    })?;
    parse_dataset(&text, path)
}

/// `path` only labels errors.
pub fn parse_dataset(text: &str, path: &Path) -> LabResult<Dataset> {
    let parse_err = |line: usize, e: serde_json::Error| LabError::Parse {
        path: path.into(),
        line,
        offset: line_offset(text, line) + e.column().saturating_sub(1),
        message: e.to_string(),
    };
    let mut lines = text.split_inclusive('\n').enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| LabError::format(path, "empty file: no header line"))?;
    let first = first.strip_suffix('\n').ok_or_else(|| LabError::format(path, "truncated header line"))?;

    let raw: serde_json::Value = serde_json::from_str(first).map_err(|e| parse_err(1, e))?;
    match raw.get("version").and_then(serde_json::Value::as_u64) {
        Some(DATASET_VERSION) => {}
        Some(found) => {
            return Err(LabError::UnsupportedVersion {
                path: path.into(),
                found,
                supported: DATASET_VERSION,
            })
        }
        None => return Err(LabError::format(path, "header has no integer `version`")),
    }
    let header: DatasetHeader = serde_json::from_str(first).map_err(|e| parse_err(1, e))?;

    let mut trajectories = Vec::with_capacity(header.n_trajectories.min(1 << 20));
    for (i, line) in lines {
        let body = line.strip_suffix('\n').ok_or_else(|| LabError::Parse {
            path: path.into(),
            line: i + 1,
            offset: line_offset(text, i + 1) + line.len(),
            message: "truncated line (no terminating newline)".into(),
        })?;
        let traj: Trajectory = serde_json::from_str(body).map_err(|e| parse_err(i + 1, e))?;
        trajectories.push(traj);
    }
    if trajectories.len() != header.n_trajectories {
        return Err(LabError::format(
            path,
            format!(
                "truncated: header declares {} trajectories, file holds {}",
                header.n_trajectories,
                trajectories.len()
            ),
        ));
    }
    let ds = Dataset {
        trajectories,
        horizon: header.horizon,
        n_actions: header.n_actions,
        state_dim: header.state_dim,
        smoothing_epsilon: header.epsilon,
        normalization: header.normalization,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use opposd_core::data::collect_dataset;
    use opposd_core::env::{CartPole, UniformPolicy};
    use opposd_core::rng::derive;

    fn small() -> Dataset {
        collect_dataset(&mut CartPole::new(), &UniformPolicy { n_actions: 2 }, 3, 30, &mut derive(4, 0, 0)).unwrap()
    }

    #[test]
    fn malformed_line_reports_position() {
        let text = encode_dataset(&small()).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let broken = lines[2].replacen("\"action\":", "\"action\":x", 1);
        lines[2] = &broken;
        let bad = lines.join("\n") + "\n";
        match parse_dataset(&bad, Path::new("d.jsonl")) {
            Err(LabError::Parse { line, offset, .. }) => {
                assert_eq!(line, 3);
                let start = line_offset(&bad, 3);
                assert!(offset > start && offset < start + broken.len());
                assert_eq!(&bad[offset..offset + 1], "x");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_only_is_truncated() {
        let text = encode_dataset(&small()).unwrap();
        let header = text.lines().next().unwrap().to_string() + "\n";
        assert!(matches!(parse_dataset(&header, Path::new("d")), Err(LabError::Format { .. })));
    }
}
