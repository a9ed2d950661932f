//! Seeded synthetic skeleton clips for desk-scale experiments.
//!
//! Normal agents walk: every joint oscillates smoothly around a body template
//! at a low gait frequency while the root drifts at constant velocity. In each
//! test clip one agent turns anomalous over a contiguous interval, either by
//! jittering (white noise on every joint) or by freezing in place. Training
//! clips contain only normal agents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::trajectory::{AgentTrajectory, Dataset, FrameLabelTrack, PoseFrame, DEFAULT_JOINTS};
use crate::config::KeyValues;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train_clips: usize,
    pub test_clips: usize,
    pub frames_per_clip: usize,
    pub agents_per_clip: usize,
    /// Fraction of each test clip's frames covered by the anomaly interval.
    pub anomaly_fraction: f64,
    /// Jittering agents' frame-to-frame displacement variance exceeds their
    /// normal variance by at least this factor.
    pub jitter_factor: f64,
    /// Share of anomalies that freeze rather than jitter.
    pub frozen_fraction: f64,
    /// Probability that a secondary agent has a tracking gap.
    pub gap_probability: f64,
    pub joints: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_clips: 10,
            test_clips: 10,
            frames_per_clip: 200,
            agents_per_clip: 3,
            anomaly_fraction: 0.3,
            jitter_factor: 25.0,
            frozen_fraction: 0.5,
            gap_probability: 0.3,
            joints: DEFAULT_JOINTS,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("anomaly_fraction", self.anomaly_fraction)?;
        unit("frozen_fraction", self.frozen_fraction)?;
        unit("gap_probability", self.gap_probability)?;
        if self.agents_per_clip == 0 || self.frames_per_clip == 0 || self.joints < 2 {
            return Err(Error::Config(
                "agents_per_clip and frames_per_clip must be >= 1 and joints >= 2".into(),
            ));
        }
        if !(self.jitter_factor > 0.0) {
            return Err(Error::Config(format!(
                "jitter_factor must be positive, got {}",
                self.jitter_factor
            )));
        }
        Ok(())
    }

    /// Overrides defaults from a config file; unknown keys are rejected.
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            train_clips: kv.take_or("train_clips", d.train_clips)?,
            test_clips: kv.take_or("test_clips", d.test_clips)?,
            frames_per_clip: kv.take_or("frames_per_clip", d.frames_per_clip)?,
            agents_per_clip: kv.take_or("agents_per_clip", d.agents_per_clip)?,
            anomaly_fraction: kv.take_or("anomaly_fraction", d.anomaly_fraction)?,
            jitter_factor: kv.take_or("jitter_factor", d.jitter_factor)?,
            frozen_fraction: kv.take_or("frozen_fraction", d.frozen_fraction)?,
            gap_probability: kv.take_or("gap_probability", d.gap_probability)?,
            joints: kv.take_or("joints", d.joints)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("train_clips".into(), self.train_clips.to_string()),
            ("test_clips".into(), self.test_clips.to_string()),
            ("frames_per_clip".into(), self.frames_per_clip.to_string()),
            ("agents_per_clip".into(), self.agents_per_clip.to_string()),
            ("anomaly_fraction".into(), self.anomaly_fraction.to_string()),
            ("jitter_factor".into(), self.jitter_factor.to_string()),
            ("frozen_fraction".into(), self.frozen_fraction.to_string()),
            ("gap_probability".into(), self.gap_probability.to_string()),
            ("joints".into(), self.joints.to_string()),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyKind {
    Jitter,
    Frozen,
}

/// Ground truth about the anomalous agent of one test clip.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectedAnomaly {
    pub clip_id: String,
    pub agent_id: String,
    pub kind: AnomalyKind,
    /// Half-open frame range.
    pub frames: std::ops::Range<i64>,
    /// The agent's expected normal frame-to-frame displacement variance per
    /// coordinate, in pixels².
    pub normal_displacement_var: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub anomalies: Vec<InjectedAnomaly>,
}

/// COCO-17 body layout in body-height units, hips at the origin, y down.
const COCO_TEMPLATE: [[f64; 2]; 17] = [
    [0.0, -0.42],
    [-0.02, -0.44],
    [0.02, -0.44],
    [-0.05, -0.43],
    [0.05, -0.43],
    [-0.11, -0.30],
    [0.11, -0.30],
    [-0.15, -0.12],
    [0.15, -0.12],
    [-0.16, 0.04],
    [0.16, 0.04],
    [-0.08, 0.0],
    [0.08, 0.0],
    [-0.09, 0.24],
    [0.09, 0.24],
    [-0.09, 0.48],
    [0.09, 0.48],
];

/// Swing amplitude (body units) and left/right phase sign for COCO joints.
const COCO_SWING: [([f64; 2], f64); 17] = [
    ([0.01, 0.005], 0.0),
    ([0.01, 0.005], 0.0),
    ([0.01, 0.005], 0.0),
    ([0.01, 0.005], 0.0),
    ([0.01, 0.005], 0.0),
    ([0.02, 0.01], 1.0),
    ([0.02, 0.01], -1.0),
    ([0.06, 0.02], 1.0),
    ([0.06, 0.02], -1.0),
    ([0.11, 0.03], 1.0),
    ([0.11, 0.03], -1.0),
    ([0.02, 0.01], -1.0),
    ([0.02, 0.01], 1.0),
    ([0.07, 0.03], -1.0),
    ([0.07, 0.03], 1.0),
    ([0.13, 0.05], -1.0),
    ([0.13, 0.05], 1.0),
];

struct Body {
    template: Vec<[f64; 2]>,
    swing: Vec<([f64; 2], f64)>,
}

impl Body {
    fn new(joints: usize, rng: &mut ChaCha8Rng) -> Self {
        if joints == COCO_TEMPLATE.len() {
            return Self {
                template: COCO_TEMPLATE.to_vec(),
                swing: COCO_SWING.to_vec(),
            };
        }
        let template = (0..joints)
            .map(|_| [rng.random_range(-0.2..0.2), rng.random_range(-0.5..0.5)])
            .collect();
        let swing = (0..joints)
            .map(|j| {
                (
                    [rng.random_range(0.01..0.1), rng.random_range(0.005..0.04)],
                    if j % 2 == 0 { 1.0 } else { -1.0 },
                )
            })
            .collect();
        Self { template, swing }
    }
}

/// Per-agent motion parameters.
struct Walker {
    root: [f64; 2],
    velocity: [f64; 2],
    height: f64,
    /// Radians per frame.
    omega: f64,
    phase: f64,
    /// Per joint: swing amplitude in pixels and phase offset.
    amp: Vec<[f64; 2]>,
    joint_phase: Vec<f64>,
    bob: f64,
    noise_sd: f64,
}

impl Walker {
    fn sample(body: &Body, rng: &mut ChaCha8Rng) -> Self {
        let height = rng.random_range(80.0..160.0);
        let freq: f64 = rng.random_range(0.03..0.07);
        let amp = body
            .swing
            .iter()
            .map(|([ax, ay], _)| {
                [
                    ax * height * rng.random_range(0.7..1.3),
                    ay * height * rng.random_range(0.7..1.3),
                ]
            })
            .collect();
        let joint_phase = body
            .swing
            .iter()
            .map(|(_, side)| {
                let base = if *side < 0.0 { std::f64::consts::PI } else { 0.0 };
                base + rng.random_range(-0.3..0.3)
            })
            .collect();
        Self {
            root: [rng.random_range(200.0..1720.0), rng.random_range(300.0..800.0)],
            velocity: [rng.random_range(-1.5..1.5), rng.random_range(-0.3..0.3)],
            height,
            omega: 2.0 * std::f64::consts::PI * freq,
            phase: rng.random_range(0.0..2.0 * std::f64::consts::PI),
            amp,
            joint_phase,
            bob: 0.01 * height,
            noise_sd: 0.002 * height,
        }
    }

    /// Noise-free joint positions at frame `t`.
    fn pose(&self, body: &Body, t: f64) -> Vec<[f64; 2]> {
        let root = [
            self.root[0] + self.velocity[0] * t,
            self.root[1] + self.velocity[1] * t,
        ];
        let bob = self.bob * (2.0 * self.omega * t + self.phase).sin();
        body.template
            .iter()
            .enumerate()
            .map(|(j, base)| {
                let s = (self.omega * t + self.phase + self.joint_phase[j]).sin();
                [
                    root[0] + base[0] * self.height + self.amp[j][0] * s,
                    root[1] + base[1] * self.height + self.amp[j][1] * s + bob,
                ]
            })
            .collect()
    }

    /// Expected variance of one coordinate's frame-to-frame displacement,
    /// averaged over joints and axes. A sinusoid of amplitude A and angular
    /// rate ω contributes 2A²sin²(ω/2); observation noise contributes 2σ².
    fn displacement_var(&self) -> f64 {
        let s1 = (self.omega / 2.0).sin().powi(2);
        let s2 = self.omega.sin().powi(2);
        let n = self.amp.len() as f64;
        let swing: f64 = self
            .amp
            .iter()
            .map(|[ax, ay]| 2.0 * ax * ax * s1 + 2.0 * ay * ay * s1)
            .sum::<f64>()
            / (2.0 * n);
        // vertical bob on the y axis only
        let bob = 2.0 * self.bob * self.bob * s2 / 2.0;
        swing + bob + 2.0 * self.noise_sd * self.noise_sd
    }
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

struct Track {
    frames: Vec<i64>,
}

fn secondary_track(frames: usize, gap_probability: f64, rng: &mut ChaCha8Rng) -> Track {
    let start = rng.random_range(0..=frames / 3);
    let end = rng.random_range(2 * frames / 3..=frames).max(start + 1);
    let mut idx: Vec<i64> = (start as i64..end as i64).collect();
    if rng.random_bool(gap_probability) && idx.len() > 20 {
        let len = rng.random_range(3..=8);
        let at = rng.random_range(5..idx.len() - len - 5);
        idx.drain(at..at + len);
    }
    Track { frames: idx }
}

#[allow(clippy::too_many_arguments)]
fn render_agent(
    clip_id: &str,
    agent_id: &str,
    body: &Body,
    walker: &Walker,
    track: &Track,
    anomaly: Option<(AnomalyKind, std::ops::Range<i64>, f64)>,
    rng: &mut ChaCha8Rng,
) -> AgentTrajectory {
    let noise = Normal::new(0.0, walker.noise_sd).expect("positive sd");
    let jitter = anomaly
        .as_ref()
        .map(|(_, _, sd)| Normal::new(0.0, *sd).expect("positive sd"));
    let frames = track
        .frames
        .iter()
        .map(|&f| {
            let mut t = f as f64;
            if let Some((AnomalyKind::Frozen, range, _)) = &anomaly {
                if range.contains(&f) {
                    t = range.start as f64;
                }
            }
            let mut joints = walker.pose(body, t);
            let jittering = matches!(&anomaly, Some((AnomalyKind::Jitter, r, _)) if r.contains(&f));
            for p in joints.iter_mut() {
                for c in p.iter_mut() {
                    *c += noise.sample(rng);
                    if jittering {
                        *c += jitter.as_ref().unwrap().sample(rng);
                    }
                    *c = round3(*c);
                }
            }
            PoseFrame { index: f, joints }
        })
        .collect();
    AgentTrajectory {
        clip_id: clip_id.to_string(),
        agent_id: agent_id.to_string(),
        frames,
    }
}

/// Generates the train and test splits. Identical seeds give identical data.
pub fn synth_dataset(seed: u64, config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = Body::new(config.joints, &mut rng);
    let n_frames = config.frames_per_clip;
    let mut out = SynthDataset {
        train: Dataset::default(),
        test: Dataset::default(),
        anomalies: Vec::new(),
    };

    for split in 0..2 {
        let (prefix, clips) = if split == 0 {
            ("train", config.train_clips)
        } else {
            ("test", config.test_clips)
        };
        for c in 0..clips {
            let clip_id = format!("{prefix}_{c:03}");
            let mut labels = vec![false; n_frames];
            let anomaly_len = (config.anomaly_fraction * n_frames as f64).round() as usize;
            for a in 0..config.agents_per_clip {
                let agent_id = format!("p{a}");
                let walker = Walker::sample(&body, &mut rng);
                let track = if a == 0 {
                    Track {
                        frames: (0..n_frames as i64).collect(),
                    }
                } else {
                    secondary_track(n_frames, config.gap_probability, &mut rng)
                };
                let mut anomaly = None;
                if split == 1 && a == 0 && anomaly_len > 0 {
                    let start = rng.random_range(0..=n_frames - anomaly_len) as i64;
                    let range = start..start + anomaly_len as i64;
                    let kind = if rng.random_bool(config.frozen_fraction) {
                        AnomalyKind::Frozen
                    } else {
                        AnomalyKind::Jitter
                    };
                    let normal_var = walker.displacement_var();
                    let jitter_sd = (config.jitter_factor * normal_var).sqrt();
                    for f in range.clone() {
                        labels[f as usize] = true;
                    }
                    out.anomalies.push(InjectedAnomaly {
                        clip_id: clip_id.clone(),
                        agent_id: agent_id.clone(),
                        kind,
                        frames: range.clone(),
                        normal_displacement_var: normal_var,
                    });
                    anomaly = Some((kind, range, jitter_sd));
                }
                let traj =
                    render_agent(&clip_id, &agent_id, &body, &walker, &track, anomaly, &mut rng);
                let target = if split == 0 { &mut out.train } else { &mut out.test };
                target.trajectories.push(traj);
            }
            let target = if split == 0 { &mut out.train } else { &mut out.test };
            target.labels.push(FrameLabelTrack { clip_id, labels });
        }
    }
    Ok(out)
}

/// Mean over joints and axes of the variance of frame-to-frame displacement
/// over consecutive frames of `traj` whose indices satisfy `keep`.
pub fn displacement_variance(traj: &AgentTrajectory, keep: impl Fn(i64) -> bool) -> f64 {
    let joints = traj.frames.first().map_or(0, |f| f.joints.len());
    let mut per_coord: Vec<Vec<f64>> = vec![Vec::new(); joints * 2];
    for pair in traj.frames.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.index != a.index + 1 || !keep(a.index) || !keep(b.index) {
            continue;
        }
        for j in 0..joints {
            for c in 0..2 {
                per_coord[j * 2 + c].push(b.joints[j][c] - a.joints[j][c]);
            }
        }
    }
    let vars: Vec<f64> = per_coord
        .iter()
        .filter(|d| d.len() > 1)
        .map(|d| {
            let m = d.iter().sum::<f64>() / d.len() as f64;
            d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64
        })
        .collect();
    if vars.is_empty() {
        return 0.0;
    }
    vars.iter().sum::<f64>() / vars.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            train_clips: 3,
            test_clips: 4,
            frames_per_clip: 120,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_dataset(7, &small()).unwrap();
        let b = synth_dataset(7, &small()).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(8, &small()).unwrap();
        assert_ne!(a.test.trajectories, c.test.trajectories);
    }

    #[test]
    fn training_split_is_normal_only() {
        let d = synth_dataset(1, &small()).unwrap();
        let positives: usize = d
            .train
            .labels
            .iter()
            .map(|l| l.labels.iter().filter(|&&x| x).count())
            .sum();
        assert_eq!(positives, 0);
        assert_eq!(d.train.labels.len(), 3);
        assert!(d.anomalies.iter().all(|a| a.clip_id.starts_with("test")));
    }

    #[test]
    fn label_rate_matches_fraction() {
        let d = synth_dataset(2, &small()).unwrap();
        for track in &d.test.labels {
            let rate = track.labels.iter().filter(|&&x| x).count() as f64 / 120.0;
            assert!((rate - 0.3).abs() < 0.01);
        }
    }

    #[test]
    fn jitter_raises_displacement_variance_by_factor() {
        let cfg = SynthConfig {
            test_clips: 12,
            frozen_fraction: 0.0,
            ..small()
        };
        let d = synth_dataset(3, &cfg).unwrap();
        for anomaly in &d.anomalies {
            assert_eq!(anomaly.kind, AnomalyKind::Jitter);
            let traj = d
                .test
                .trajectories
                .iter()
                .find(|t| t.clip_id == anomaly.clip_id && t.agent_id == anomaly.agent_id)
                .unwrap();
            let inside = displacement_variance(traj, |f| anomaly.frames.contains(&f));
            let outside = displacement_variance(traj, |f| !anomaly.frames.contains(&f));
            assert!(
                inside >= cfg.jitter_factor * outside,
                "{}: {inside} vs {outside}",
                anomaly.clip_id
            );
            // the analytic normal variance matches what the data shows
            let rel = (outside - anomaly.normal_displacement_var).abs() / outside;
            assert!(rel < 0.5, "{rel}");
        }
    }

    #[test]
    fn frozen_agents_stop_moving() {
        let cfg = SynthConfig {
            frozen_fraction: 1.0,
            ..small()
        };
        let d = synth_dataset(4, &cfg).unwrap();
        for anomaly in &d.anomalies {
            let traj = d
                .test
                .trajectories
                .iter()
                .find(|t| t.clip_id == anomaly.clip_id && t.agent_id == anomaly.agent_id)
                .unwrap();
            let inside = displacement_variance(traj, |f| anomaly.frames.contains(&f));
            let outside = displacement_variance(traj, |f| !anomaly.frames.contains(&f));
            assert!(inside < 0.2 * outside);
        }
    }

    #[test]
    fn invalid_fraction_is_config_error() {
        let cfg = SynthConfig {
            anomaly_fraction: 1.5,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_dataset(0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn small_skeletons_are_supported() {
        let cfg = SynthConfig {
            joints: 5,
            ..small()
        };
        let d = synth_dataset(5, &cfg).unwrap();
        assert!(d.train.trajectories.iter().all(|t| t.frames[0].joints.len() == 5));
    }
}
