//! Per-agent trajectories and frame labels, with their tab-separated formats.
//!
//! Trajectory records: `clip_id<TAB>agent_id<TAB>frame_index<TAB>x1,y1,...,xV,yV`.
//! Label records: `clip_id<TAB>frame_index<TAB>label` with label in {0,1}.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_JOINTS: usize = 17;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrame {
    pub index: i64,
    pub joints: Vec<[f64; 2]>,
}

/// One tracked person in one clip. Frame indices are strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrajectory {
    pub clip_id: String,
    pub agent_id: String,
    pub frames: Vec<PoseFrame>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLabelTrack {
    pub clip_id: String,
    /// One flag per clip frame, starting at frame 0.
    pub labels: Vec<bool>,
}

impl FrameLabelTrack {
    pub fn frame_count(&self) -> usize {
        self.labels.len()
    }
}

/// Trajectories plus the per-clip labels, when a label file was supplied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<AgentTrajectory>,
    pub labels: Vec<FrameLabelTrack>,
}

impl Dataset {
    pub fn load(trajectories: &Path, labels: Option<&Path>, joints: usize) -> Result<Self> {
        Ok(Self {
            trajectories: load_trajectories(trajectories, joints)?,
            labels: match labels {
                Some(p) => load_labels(p)?,
                None => Vec::new(),
            },
        })
    }

    pub fn labels_for(&self, clip_id: &str) -> Option<&FrameLabelTrack> {
        self.labels.iter().find(|l| l.clip_id == clip_id)
    }
}

pub fn load_trajectories(path: &Path, joints: usize) -> Result<Vec<AgentTrajectory>> {
    parse_trajectories(&std::fs::read_to_string(path)?, joints)
}

/// Parses trajectory records, grouped by `(clip_id, agent_id)` in sorted
/// order with frames sorted ascending.
pub fn parse_trajectories(text: &str, joints: usize) -> Result<Vec<AgentTrajectory>> {
    let mut groups: BTreeMap<(String, String), Vec<(PoseFrame, usize)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let index: i64 = fields[2].trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("bad frame index `{}`: {e}", fields[2]),
        })?;
        let coords = fields[3]
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("bad coordinate: {e}"),
            })?;
        if coords.len() % 2 != 0 || coords.len() / 2 != joints {
            return Err(Error::Schema {
                line: line_no,
                msg: format!(
                    "record {}/{}/{} has {} coordinates, expected {} joints ({} values)",
                    fields[0],
                    fields[1],
                    index,
                    coords.len(),
                    joints,
                    2 * joints
                ),
            });
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                msg: "non-finite coordinate".into(),
            });
        }
        let frame = PoseFrame {
            index,
            joints: coords.chunks(2).map(|p| [p[0], p[1]]).collect(),
        };
        groups
            .entry((fields[0].to_string(), fields[1].to_string()))
            .or_default()
            .push((frame, line_no));
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((clip_id, agent_id), mut frames) in groups {
        frames.sort_by_key(|(f, _)| f.index);
        for pair in frames.windows(2) {
            if pair[0].0.index == pair[1].0.index {
                return Err(Error::Schema {
                    line: pair[1].1,
                    msg: format!(
                        "duplicate frame {} for agent {agent_id} in clip {clip_id}",
                        pair[1].0.index
                    ),
                });
            }
        }
        out.push(AgentTrajectory {
            clip_id,
            agent_id,
            frames: frames.into_iter().map(|(f, _)| f).collect(),
        });
    }
    Ok(out)
}

pub fn write_trajectories(trajectories: &[AgentTrajectory]) -> String {
    let mut out = String::new();
    for traj in trajectories {
        for frame in &traj.frames {
            let _ = write!(out, "{}\t{}\t{}\t", traj.clip_id, traj.agent_id, frame.index);
            for (j, [x, y]) in frame.joints.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{x},{y}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn load_labels(path: &Path) -> Result<Vec<FrameLabelTrack>> {
    parse_labels(&std::fs::read_to_string(path)?)
}

/// Parses label records. Every clip must list each frame from 0 to its last
/// frame exactly once.
pub fn parse_labels(text: &str) -> Result<Vec<FrameLabelTrack>> {
    let mut clips: BTreeMap<String, BTreeMap<i64, (bool, usize)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let frame: i64 = fields[1].trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("bad frame index `{}`: {e}", fields[1]),
        })?;
        let label = match fields[2].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("label must be 0 or 1, got `{other}`"),
                })
            }
        };
        if clips
            .entry(fields[0].to_string())
            .or_default()
            .insert(frame, (label, line_no))
            .is_some()
        {
            return Err(Error::Schema {
                line: line_no,
                msg: format!("duplicate label for clip {} frame {frame}", fields[0]),
            });
        }
    }
    clips
        .into_iter()
        .map(|(clip_id, frames)| {
            for (expected, (&frame, &(_, line))) in frames.iter().enumerate() {
                if frame != expected as i64 {
                    return Err(Error::Schema {
                        line,
                        msg: format!(
                            "clip {clip_id}: labels must cover frames 0.. contiguously, found {frame} where {expected} was expected"
                        ),
                    });
                }
            }
            Ok(FrameLabelTrack {
                clip_id,
                labels: frames.into_values().map(|(l, _)| l).collect(),
            })
        })
        .collect()
}

pub fn write_labels(tracks: &[FrameLabelTrack]) -> String {
    let mut out = String::new();
    for track in tracks {
        for (f, &l) in track.labels.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}", track.clip_id, f, u8::from(l));
        }
    }
    out
}
