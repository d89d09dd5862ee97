//! Training checkpoints and the JSON-lines metrics log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::assets::encode_splats;
use super::records::to_json;
use crate::error::{Error, Result};
use crate::math::{quat_from_wxyz, quat_wxyz, Quat, Vec3};
use crate::trainer::{Adam, Checkpoint, TrainObserver};
use crate::types::{PoseParams, Splat};

#[derive(Serialize, Deserialize)]
struct SplatRecord {
    mu: [f64; 3],
    rot: [f64; 4],
    log_scale: [f64; 3],
    color: [f64; 3],
    opacity: f64,
    polygon_id: u32,
}

#[derive(Serialize, Deserialize)]
struct State {
    iteration: usize,
    adam: Adam,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    poses: Option<Vec<PoseParams>>,
    /// Exact parameters; the splat asset next to this file is rounded.
    splats: Vec<SplatRecord>,
}

fn stem(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:06}"))
}

/// Writes `checkpoint_NNNNNN.msplat` and `checkpoint_NNNNNN.json` and
/// returns the path of the latter.
pub fn store_checkpoint(dir: &Path, c: &Checkpoint) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let base = stem(dir, c.iteration);
    fs::write(base.with_extension("msplat"), encode_splats(&c.splats)?)?;
    let state = State {
        iteration: c.iteration,
        adam: c.adam.clone(),
        poses: c.poses.clone(),
        splats: c
            .splats
            .iter()
            .map(|s| SplatRecord {
                mu: s.mu_local.into(),
                rot: quat_wxyz(s.rot_local.quaternion()),
                log_scale: s.log_scale.into(),
                color: s.color.into(),
                opacity: s.opacity,
                polygon_id: s.polygon_id,
            })
            .collect(),
    };
    let path = base.with_extension("json");
    fs::write(&path, to_json(&state)?)?;
    Ok(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let state: State = serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| Error::Format(format!("checkpoint {}: {e}", path.display())))?;
    Ok(Checkpoint {
        iteration: state.iteration,
        adam: state.adam,
        poses: state.poses,
        splats: state
            .splats
            .into_iter()
            .map(|r| Splat {
                mu_local: Vec3::from(r.mu),
                rot_local: Quat::new_unchecked(quat_from_wxyz(r.rot)),
                log_scale: Vec3::from(r.log_scale),
                color: Vec3::from(r.color),
                opacity: r.opacity,
                polygon_id: r.polygon_id,
            })
            .collect(),
    })
}

/// Appends each log entry as one JSON line and writes checkpoints into a
/// directory.
pub struct FileObserver<W: Write> {
    pub log: W,
    pub checkpoint_dir: Option<PathBuf>,
    pub written: Vec<PathBuf>,
}

impl<W: Write> TrainObserver for FileObserver<W> {
    fn log(&mut self, entry: &Value) {
        // the log is advisory; a failed write must not stop training
        let _ = writeln!(self.log, "{entry}");
    }

    fn checkpoint(&mut self, c: &Checkpoint) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            self.written.push(store_checkpoint(dir, c)?);
        }
        Ok(())
    }
}
