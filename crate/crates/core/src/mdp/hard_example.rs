//! Six-state instance on which the uncorrected off-policy gradient vanishes.
//!
//! ```text
//! s0 --l--> s1 --l--> s3 (reward 1) --> T
//!    \         \-r--> s3 | s4 (1/2 each)
//!     -r--> s2 --l--> s4 (reward 0) --> T
//!              \-r--> s3 | s4 (1/2 each)
//! ```
//!
//! `pi_alpha` picks `l` with probability `alpha` in both `s1` and `s2` and
//! always picks `l` elsewhere.

use alloc::vec;
use alloc::vec::Vec;

use super::gradient::AliasedFamily;
use super::{PolicyTable, TabularMdp};
use crate::error::Result;

pub const S0: usize = 0;
pub const S1: usize = 1;
pub const S2: usize = 2;
pub const S3: usize = 3;
pub const S4: usize = 4;
pub const TERMINAL: usize = 5;
pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
/// Every episode reaches `T` after exactly three steps.
pub const HORIZON: usize = 3;

/// The instance, its one-parameter policy family and the uniform behavior
/// policy.
#[derive(Debug, Clone)]
pub struct HardExampleFamily {
    pub mdp: TabularMdp,
    pub family: AliasedFamily,
    pub behavior: PolicyTable,
}

impl HardExampleFamily {
    pub fn policy(&self, alpha: f64) -> Result<PolicyTable> {
        use super::gradient::PolicyFamily;
        self.family.policy(&[alpha])
    }
}

fn point(n: usize, s: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[s] = 1.0;
    v
}

pub fn hard_example_mdp() -> HardExampleFamily {
    let n = 6;
    let mut split = vec![0.0; n];
    split[S3] = 0.5;
    split[S4] = 0.5;
    let transition = vec![
        vec![point(n, S1), point(n, S2)],
        vec![point(n, S3), split.clone()],
        vec![point(n, S4), split],
        vec![point(n, TERMINAL), point(n, TERMINAL)],
        vec![point(n, TERMINAL), point(n, TERMINAL)],
        vec![point(n, TERMINAL), point(n, TERMINAL)],
    ];
    let mut reward = vec![vec![0.0; 2]; n];
    reward[S3] = vec![1.0, 1.0];
    let mdp = TabularMdp::new(transition, reward, 1.0, point(n, S0), Some(HORIZON))
        .expect("hard example tables are valid");
    let base = PolicyTable::new(vec![vec![1.0, 0.0]; n]).expect("deterministic rows");
    let family = AliasedFamily::new(base, vec![S1, S2]).expect("two actions");
    HardExampleFamily {
        mdp,
        family,
        behavior: PolicyTable::uniform(n, 2),
    }
}
