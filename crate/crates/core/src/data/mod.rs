//! Trajectory I/O, windowing, normalization and synthetic data.

mod normalize;
mod synth;
mod trajectory;
mod window;

pub use normalize::{
    normalize_frames, normalize_pose, normalize_training_set, quantile_sorted, RobustStats,
};
pub use synth::{
    displacement_variance, synth_dataset, AnomalyKind, InjectedAnomaly, SynthConfig,
    SynthDataset,
};
pub use trajectory::{
    load_labels, load_trajectories, parse_labels, parse_trajectories, write_labels,
    write_trajectories, AgentTrajectory, Dataset, FrameLabelTrack, PoseFrame, DEFAULT_JOINTS,
};
pub use window::{consecutive_runs, window_slice, PoseWindow, DEFAULT_STRIDE, DEFAULT_WINDOW};
