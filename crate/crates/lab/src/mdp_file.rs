//! JSON files for tabular MDPs and policy tables.
//!
//! MDP: `{"transition": [[[p(s'|s,a)]]], "reward": [[r(s,a)]], "gamma": g,
//! "initial_dist": [..], "horizon": H}`, with `horizon` optional for
//! `gamma < 1`. Policy: `{"probs": [[pi(a|s)]]}`.

use std::fs;
use std::path::Path;

use opposd_core::mdp::{PolicyTable, TabularMdp};
use serde::{Deserialize, Serialize};

use crate::checkpoint::line_offset;
use crate::error::{LabError, LabResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    pub initial_dist: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

impl MdpFile {
    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        MdpFile {
            transition: (0..ns)
                .map(|s| (0..na).map(|a| mdp.transition(s, a).to_vec()).collect())
                .collect(),
            reward: (0..ns).map(|s| (0..na).map(|a| mdp.reward(s, a)).collect()).collect(),
            gamma: mdp.gamma(),
            initial_dist: mdp.initial_dist().to_vec(),
            horizon: mdp.horizon(),
        }
    }

    pub fn into_mdp(self) -> opposd_core::Result<TabularMdp> {
        TabularMdp::new(self.transition, self.reward, self.gamma, self.initial_dist, self.horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    probs: Vec<Vec<f64>>,
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

fn write_json<T: Serialize>(path: &Path, value: &T) -> LabResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| LabError::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(LabError::io(path))
}

pub fn load_mdp(path: &Path) -> LabResult<TabularMdp> {
    Ok(read_json::<MdpFile>(path)?.into_mdp()?)
}

pub fn save_mdp(mdp: &TabularMdp, path: &Path) -> LabResult<()> {
    write_json(path, &MdpFile::from_mdp(mdp))
}

pub fn load_policy(path: &Path) -> LabResult<PolicyTable> {
    Ok(PolicyTable::new(read_json::<PolicyFile>(path)?.probs)?)
}

pub fn save_policy(policy: &PolicyTable, path: &Path) -> LabResult<()> {
    write_json(path, &PolicyFile { probs: policy.rows().to_vec() })
}
