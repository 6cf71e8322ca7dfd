//! Per-case annotation state and its on-disk form.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use extremeseg::pipeline::RoundRecord;
use extremeseg::points::ExtremePointSet;
use extremeseg::volume::Voxel;

use crate::imaging::Runs;

/// Up to six clicks; absent slots have not been placed yet.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialPoints {
    pub x_min: Option<Voxel>,
    pub x_max: Option<Voxel>,
    pub y_min: Option<Voxel>,
    pub y_max: Option<Voxel>,
    pub z_min: Option<Voxel>,
    pub z_max: Option<Voxel>,
}

pub const SLOT_NAMES: [&str; 6] = ["x_min", "x_max", "y_min", "y_max", "z_min", "z_max"];

impl PartialPoints {
    pub fn slots(&self) -> [Option<Voxel>; 6] {
        [self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max]
    }

    pub fn count(&self) -> usize {
        self.slots().iter().flatten().count()
    }

    pub fn missing(&self) -> Vec<&'static str> {
        SLOT_NAMES
            .iter()
            .zip(self.slots())
            .filter(|(_, s)| s.is_none())
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn complete(&self) -> Option<ExtremePointSet> {
        Some(ExtremePointSet {
            x_min: self.x_min?,
            x_max: self.x_max?,
            y_min: self.y_min?,
            y_max: self.y_max?,
            z_min: self.z_min?,
            z_max: self.z_max?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Init,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub job: u64,
    pub mode: Mode,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub dims: [usize; 3],
    pub foreground_voxels: usize,
    /// Per-`z` foreground runs, see [`crate::imaging::encode_runs`].
    pub overlay: Vec<Runs>,
    pub rounds: Vec<RoundRecord>,
    pub mean_dice_prev: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub points: PartialPoints,
    pub result: Option<JobResult>,
    pub jobs_started: u64,
}

impl Session {
    pub fn path(dir: &Path, case: &str) -> PathBuf {
        dir.join(".sessions").join(format!("{case}.json"))
    }

    /// Loads a stored session; a job recorded as running did not survive
    /// the restart and is reported as failed.
    pub fn load(dir: &Path, case: &str) -> Session {
        let Ok(text) = fs::read_to_string(Self::path(dir, case)) else {
            return Session::default();
        };
        let mut s: Session = match serde_json::from_str(&text) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("ignoring unreadable session for {case}: {e}");
                return Session::default();
            }
        };
        if let Some(r) = &mut s.result {
            if r.state == JobState::Running {
                r.state = JobState::Failed;
                r.error = Some("interrupted by a restart".into());
            }
        }
        s
    }

    pub fn store(&self, dir: &Path, case: &str) -> std::io::Result<()> {
        let path = Self::path(dir, case);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self).expect("session serializes"))?;
        fs::rename(tmp, path)
    }

    pub fn running(&self) -> bool {
        self.result.as_ref().is_some_and(|r| r.state == JobState::Running)
    }
}
