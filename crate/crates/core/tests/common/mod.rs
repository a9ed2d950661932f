//! Oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use skelocc::data::{AgentTrajectory, FrameLabelTrack, PoseFrame};
use skelocc::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Relative error between the tape gradient of `f` and central differences,
/// taken over all inputs at once.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor], grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = grad;
                tape.leaf(t)
            })
            .collect();
        let out = f(&mut tape, &vars);
        let value = tape.value(out).item();
        if !grad {
            return (value, Vec::new());
        }
        let g = tape.backward(out).unwrap();
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(v, t)| {
                g.get(*v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let flat: Vec<f64> = analytic.concat();
    let numeric = numeric_gradient(inputs, |vals| eval(vals, false).0);
    relative_error(&flat, &numeric)
}

/// Central differences of `f` with respect to every entry of `inputs`,
/// concatenated in order.
pub fn numeric_gradient(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            out.push((f(&plus) - f(&minus)) / (2.0 * FD_STEP));
        }
    }
    out
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// AUC by counting every positive/negative pair; ties count one half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice_wins, mut pos, mut neg) = (0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                twice_wins += 2;
            } else if scores[i] == scores[j] {
                twice_wins += 1;
            }
        }
    }
    twice_wins as f64 / (2 * pos * neg) as f64
}

/// Random trajectory over `frames` frames with occasional gaps.
pub fn random_trajectory(
    rng: &mut ChaCha8Rng,
    clip: &str,
    agent: &str,
    frames: i64,
    joints: usize,
    gap_rate: f64,
) -> AgentTrajectory {
    let start = rng.random_range(0..frames / 4);
    let end = rng.random_range(frames / 2..=frames);
    let mut out = Vec::new();
    let mut f = start;
    while f < end {
        if rng.random_bool(gap_rate) {
            f += rng.random_range(1..6);
            continue;
        }
        let joints = (0..joints)
            .map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..200.0)])
            .collect();
        out.push(PoseFrame { index: f, joints });
        f += 1;
    }
    AgentTrajectory {
        clip_id: clip.into(),
        agent_id: agent.into(),
        frames: out,
    }
}

/// Start frames of every length-`len` run of consecutive frame indices.
pub fn brute_force_window_starts(traj: &AgentTrajectory, len: usize) -> Vec<i64> {
    let present: std::collections::BTreeSet<i64> = traj.frames.iter().map(|f| f.index).collect();
    present
        .iter()
        .copied()
        .filter(|&s| (s..s + len as i64).all(|f| present.contains(&f)))
        .collect()
}

/// Frame score per clip by direct enumeration: for every frame, the
/// maximum over agents of the mean score of that agent's windows covering
/// the frame. Frames no window covers are absent.
pub fn brute_force_cascade(
    windows: &[(String, String, i64, usize, f64)],
) -> BTreeMap<String, BTreeMap<i64, f64>> {
    let mut clips: BTreeMap<String, BTreeMap<i64, f64>> = BTreeMap::new();
    let agents: std::collections::BTreeSet<(String, String)> = windows
        .iter()
        .map(|w| (w.0.clone(), w.1.clone()))
        .collect();
    for (clip, agent) in agents {
        let mine: Vec<_> = windows
            .iter()
            .filter(|w| w.0 == clip && w.1 == agent)
            .collect();
        let lo = mine.iter().map(|w| w.2).min().unwrap();
        let hi = mine.iter().map(|w| w.2 + w.3 as i64).max().unwrap();
        for f in lo..hi {
            let covering: Vec<f64> = mine
                .iter()
                .filter(|w| w.2 <= f && f < w.2 + w.3 as i64)
                .map(|w| w.4)
                .collect();
            if covering.is_empty() {
                continue;
            }
            let mean = covering.iter().sum::<f64>() / covering.len() as f64;
            let slot = clips.entry(clip.clone()).or_default();
            let e = slot.entry(f).or_insert(f64::NEG_INFINITY);
            *e = e.max(mean);
        }
    }
    clips
}

/// Mean joint-displacement variance over the window `[start, start+len)`
/// of a trajectory with consecutive frames there.
pub fn window_displacement_variance(traj: &AgentTrajectory, start: i64, len: usize) -> f64 {
    let frames: Vec<&PoseFrame> = traj
        .frames
        .iter()
        .filter(|f| f.index >= start && f.index < start + len as i64)
        .collect();
    let joints = frames[0].joints.len();
    let mut total = 0.0;
    for j in 0..joints {
        for c in 0..2 {
            let d: Vec<f64> = frames
                .windows(2)
                .map(|p| p[1].joints[j][c] - p[0].joints[j][c])
                .collect();
            let m = d.iter().sum::<f64>() / d.len() as f64;
            total += d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        }
    }
    total / (2 * joints) as f64
}

/// Positive and total frame counts of a label set.
pub fn label_rate(labels: &[FrameLabelTrack]) -> (usize, usize) {
    let pos = labels
        .iter()
        .map(|l| l.labels.iter().filter(|&&x| x).count())
        .sum();
    let total = labels.iter().map(|l| l.labels.len()).sum();
    (pos, total)
}
