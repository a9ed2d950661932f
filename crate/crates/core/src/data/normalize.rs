//! Two-stage pose normalization.
//!
//! Stage 1 works per frame: subtract the joints' bounding-box center and
//! divide each axis by the box width or height, which removes image location
//! and person scale. Stage 2 works per coordinate channel: subtract the
//! training-split median and divide by the training-split interquartile range.

use std::path::Path;

use super::window::PoseWindow;
use crate::config::{render, KeyValues};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stage 1 on every frame of `window`. A zero-extent axis keeps scale 1 and
/// flags the window as degenerate.
pub fn normalize_frames(window: &PoseWindow) -> PoseWindow {
    let (t, v) = (window.frames(), window.joints());
    let src = window.values.data();
    let mut data = Vec::with_capacity(src.len());
    let mut degenerate = window.degenerate;
    for f in 0..t {
        let frame = &src[f * v * 2..(f + 1) * v * 2];
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in frame.chunks(2) {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut center = [0.0; 2];
        let mut extent = [1.0; 2];
        for a in 0..2 {
            center[a] = 0.5 * (lo[a] + hi[a]);
            let e = hi[a] - lo[a];
            if e > 0.0 {
                extent[a] = e;
            } else {
                degenerate = true;
            }
        }
        for p in frame.chunks(2) {
            data.push((p[0] - center[0]) / extent[0]);
            data.push((p[1] - center[1]) / extent[1]);
        }
    }
    PoseWindow {
        clip_id: window.clip_id.clone(),
        agent_id: window.agent_id.clone(),
        start_frame: window.start_frame,
        values: Tensor::new(window.values.shape(), data).expect("same shape"),
        degenerate,
    }
}

/// Linear-interpolation quantile of sorted data, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-channel median and interquartile range of the training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustStats {
    pub median: [f64; 2],
    pub iqr: [f64; 2],
}

impl Default for RobustStats {
    fn default() -> Self {
        Self {
            median: [0.0; 2],
            iqr: [1.0; 2],
        }
    }
}

impl RobustStats {
    /// Fits on stage-1 normalized training windows. A zero IQR becomes 1.
    pub fn fit(windows: &[PoseWindow]) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::EmptySet("robust statistics of no windows"));
        }
        let mut channels: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for w in windows {
            for p in w.values.data().chunks(2) {
                channels[0].push(p[0]);
                channels[1].push(p[1]);
            }
        }
        let mut stats = Self::default();
        for (a, ch) in channels.iter_mut().enumerate() {
            ch.sort_by(f64::total_cmp);
            stats.median[a] = quantile_sorted(ch, 0.5);
            let iqr = quantile_sorted(ch, 0.75) - quantile_sorted(ch, 0.25);
            stats.iqr[a] = if iqr > 0.0 { iqr } else { 1.0 };
        }
        Ok(stats)
    }

    /// Stage 2.
    pub fn apply(&self, window: &PoseWindow) -> PoseWindow {
        let data = window
            .values
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| (x - self.median[i % 2]) / self.iqr[i % 2])
            .collect();
        PoseWindow {
            values: Tensor::new(window.values.shape(), data).expect("same shape"),
            clip_id: window.clip_id.clone(),
            agent_id: window.agent_id.clone(),
            start_frame: window.start_frame,
            degenerate: window.degenerate,
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("median_x".into(), format!("{:e}", self.median[0])),
            ("median_y".into(), format!("{:e}", self.median[1])),
            ("iqr_x".into(), format!("{:e}", self.iqr[0])),
            ("iqr_y".into(), format!("{:e}", self.iqr[1])),
        ]
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        Ok(Self {
            median: [kv.take_required("median_x")?, kv.take_required("median_y")?],
            iqr: [kv.take_required("iqr_x")?, kv.take_required("iqr_y")?],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, render(&self.to_pairs()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut kv = KeyValues::from_file(path)?;
        let stats = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(stats)
    }
}

/// Both stages.
pub fn normalize_pose(window: &PoseWindow, stats: &RobustStats) -> PoseWindow {
    stats.apply(&normalize_frames(window))
}

/// Stage 1 on all windows, fit stage 2 on them, then apply it.
pub fn normalize_training_set(windows: &[PoseWindow]) -> Result<(Vec<PoseWindow>, RobustStats)> {
    let stage1: Vec<PoseWindow> = windows.iter().map(normalize_frames).collect();
    let stats = RobustStats::fit(&stage1)?;
    Ok((stage1.iter().map(|w| stats.apply(w)).collect(), stats))
}
