//! Sliding windows over consecutive frames.

use super::trajectory::AgentTrajectory;
use crate::tensor::Tensor;

pub const DEFAULT_WINDOW: usize = 12;
pub const DEFAULT_STRIDE: usize = 1;

/// `T` consecutive frames of one agent, stored as a `[T, V, 2]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseWindow {
    pub clip_id: String,
    pub agent_id: String,
    pub start_frame: i64,
    pub values: Tensor,
    /// Set when some frame had a zero-width or zero-height bounding box.
    pub degenerate: bool,
}

impl PoseWindow {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn end_frame(&self) -> i64 {
        self.start_frame + self.frames() as i64 - 1
    }

    pub fn contains(&self, frame: i64) -> bool {
        frame >= self.start_frame && frame <= self.end_frame()
    }
}

/// Maximal runs of consecutive frame indices, as `(first_position, len)`.
pub fn consecutive_runs(traj: &AgentTrajectory) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=traj.frames.len() {
        if i == traj.frames.len() || traj.frames[i].index != traj.frames[i - 1].index + 1 {
            runs.push((start, i - start));
            start = i;
        }
    }
    if traj.frames.is_empty() {
        runs.clear();
    }
    runs
}

/// Windows of `len` consecutive frames advancing by `stride` inside each
/// maximal run; no window spans a tracking gap.
///
/// # Panics
/// If `len` or `stride` is zero.
pub fn window_slice(traj: &AgentTrajectory, len: usize, stride: usize) -> Vec<PoseWindow> {
    assert!(len >= 1 && stride >= 1, "window length and stride must be >= 1");
    let mut out = Vec::new();
    for (start, run) in consecutive_runs(traj) {
        if run < len {
            continue;
        }
        let mut offset = 0;
        while offset + len <= run {
            let frames = &traj.frames[start + offset..start + offset + len];
            let joints = frames[0].joints.len();
            let mut data = Vec::with_capacity(len * joints * 2);
            for f in frames {
                for [x, y] in &f.joints {
                    data.push(*x);
                    data.push(*y);
                }
            }
            out.push(PoseWindow {
                clip_id: traj.clip_id.clone(),
                agent_id: traj.agent_id.clone(),
                start_frame: frames[0].index,
                values: Tensor::new(&[len, joints, 2], data).expect("window shape"),
                degenerate: false,
            });
            offset += stride;
        }
    }
    out
}
