//! Window scores, their aggregation into frame scores, and frame-level AUC.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{normalize_pose, window_slice, AgentTrajectory, FrameLabelTrack, RobustStats};
use crate::error::{Error, Result};
use crate::manifold::{distance, CenterState, Manifold};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::{infer_chunk, Inference, INFER_CHUNK};

/// Which per-window quantity is the anomaly score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    /// Latent distance to the center.
    Distance,
    /// Reconstruction error (AE mode).
    Reconstruction,
    /// Unweighted sum of the two.
    Combined,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [
        ScoreKind::Distance,
        ScoreKind::Reconstruction,
        ScoreKind::Combined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Distance => "s_hyp",
            ScoreKind::Reconstruction => "s_rec",
            ScoreKind::Combined => "s_rec+s_hyp",
        }
    }

    pub fn needs_decoder(self) -> bool {
        self != ScoreKind::Distance
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s_hyp" | "distance" => Ok(ScoreKind::Distance),
            "s_rec" | "reconstruction" => Ok(ScoreKind::Reconstruction),
            "s_rec+s_hyp" | "s_hyp+s_rec" | "combined" => Ok(ScoreKind::Combined),
            other => Err(Error::Config(format!(
                "unknown score kind `{other}` (expected s_hyp | s_rec | s_rec+s_hyp)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowScore {
    pub clip_id: String,
    pub agent_id: String,
    pub start_frame: i64,
    pub frames: usize,
    pub score: f64,
}

impl WindowScore {
    pub fn contains(&self, frame: i64) -> bool {
        frame >= self.start_frame && frame < self.start_frame + self.frames as i64
    }
}

/// Score of one inference result.
pub fn window_score(
    inference: &Inference,
    center: &CenterState,
    kind: ScoreKind,
) -> Result<f64> {
    if inference.latent.manifold() != center.point.manifold() {
        return Err(Error::State(format!(
            "window embedded on {} but the center lives on {}",
            inference.latent.manifold(),
            center.point.manifold()
        )));
    }
    let rec = || {
        inference
            .reconstruction
            .ok_or(Error::Unsupported("reconstruction score without AE mode"))
    };
    Ok(match kind {
        ScoreKind::Distance => distance(&inference.latent, &center.point)?,
        ScoreKind::Reconstruction => rec()?,
        ScoreKind::Combined => distance(&inference.latent, &center.point)? + rec()?,
    })
}

/// Everything needed to score raw trajectories.
pub struct Scorer<'a> {
    pub model: &'a Model,
    pub manifold: Manifold,
    pub center: &'a CenterState,
    pub stats: &'a RobustStats,
    pub window: usize,
    pub kind: ScoreKind,
    /// Worker threads; 1 scores sequentially.
    pub threads: usize,
}

impl Scorer<'_> {
    /// Scores normalized `[T,V,2]` windows. Chunking is independent of the
    /// thread count, so results are identical for any `threads`.
    pub fn score_tensors(&self, windows: &[&Tensor]) -> Result<Vec<f64>> {
        if self.kind.needs_decoder() && !self.model.config.ae {
            return Err(Error::Config(format!(
                "score kind {} needs a model trained with --ae",
                self.kind
            )));
        }
        let run = |chunk: &[&Tensor]| -> Result<Vec<f64>> {
            let mut model = self.model.clone();
            infer_chunk(&mut model, self.manifold, chunk)?
                .iter()
                .map(|inf| window_score(inf, self.center, self.kind))
                .collect()
        };
        let chunks: Vec<&[&Tensor]> = windows.chunks(INFER_CHUNK).collect();
        let parts: Vec<Result<Vec<f64>>> = if self.threads <= 1 {
            chunks.iter().map(|c| run(c)).collect()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| chunks.par_iter().map(|c| run(c)).collect())
        };
        let mut out = Vec::with_capacity(windows.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Slices every trajectory with stride 1, normalizes and scores.
    pub fn score_trajectories(&self, trajectories: &[AgentTrajectory]) -> Result<Vec<WindowScore>> {
        let windows: Vec<_> = trajectories
            .iter()
            .flat_map(|t| window_slice(t, self.window, 1))
            .map(|w| normalize_pose(&w, self.stats))
            .collect();
        let tensors: Vec<&Tensor> = windows.iter().map(|w| &w.values).collect();
        let scores = if tensors.is_empty() {
            Vec::new()
        } else {
            self.score_tensors(&tensors)?
        };
        Ok(windows
            .iter()
            .zip(scores)
            .map(|(w, score)| WindowScore {
                clip_id: w.clip_id.clone(),
                agent_id: w.agent_id.clone(),
                start_frame: w.start_frame,
                frames: w.frames(),
                score,
            })
            .collect())
    }
}

/// Per clip and agent: the mean score of the windows covering each frame.
pub fn agent_frame_scores(
    windows: &[WindowScore],
) -> BTreeMap<(String, String), BTreeMap<i64, f64>> {
    let mut acc: BTreeMap<(String, String), BTreeMap<i64, (f64, usize)>> = BTreeMap::new();
    for w in windows {
        let frames = acc
            .entry((w.clip_id.clone(), w.agent_id.clone()))
            .or_default();
        for f in w.start_frame..w.start_frame + w.frames as i64 {
            let e = frames.entry(f).or_insert((0.0, 0));
            e.0 += w.score;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, frames)| {
            let means = frames
                .into_iter()
                .map(|(f, (sum, n))| (f, sum / n as f64))
                .collect();
            (k, means)
        })
        .collect()
}

/// Per-frame scores of one clip, defined where the mask is set.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyTimeline {
    pub clip_id: String,
    /// Frame `i` at index `i`; 0 where uncovered.
    pub scores: Vec<f64>,
    pub covered: Vec<bool>,
}

impl AnomalyTimeline {
    pub fn covered_frames(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }
}

/// Max over agents of the per-agent frame scores, per clip. A clip's
/// timeline spans frame 0 to its last covered frame, extended to
/// `frame_counts[clip]` when given. Negative frame indices are dropped.
pub fn frame_timelines(
    windows: &[WindowScore],
    frame_counts: &BTreeMap<String, usize>,
) -> Vec<AnomalyTimeline> {
    let mut clips: BTreeMap<String, BTreeMap<i64, f64>> = BTreeMap::new();
    for ((clip, _), frames) in agent_frame_scores(windows) {
        let best = clips.entry(clip).or_default();
        for (f, s) in frames {
            best.entry(f).and_modify(|b| *b = b.max(s)).or_insert(s);
        }
    }
    for clip in frame_counts.keys() {
        clips.entry(clip.clone()).or_default();
    }
    clips
        .into_iter()
        .map(|(clip_id, frames)| {
            let last = frames.keys().next_back().map_or(0, |&f| (f + 1).max(0) as usize);
            let len = last.max(frame_counts.get(&clip_id).copied().unwrap_or(0));
            let mut scores = vec![0.0; len];
            let mut covered = vec![false; len];
            for (f, s) in frames {
                if f >= 0 {
                    scores[f as usize] = s;
                    covered[f as usize] = true;
                }
            }
            AnomalyTimeline {
                clip_id,
                scores,
                covered,
            }
        })
        .collect()
}

/// Median, averaging the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Area under the ROC curve from midranks; tied positive/negative pairs count
/// one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc", &[scores.len()], &[labels.len()]));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps midranks integral
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the midrank (i+j+2)/2
        let mid2 = (i + j + 2) as u128;
        for &k in &order[i..=j] {
            if labels[k] {
                rank2_sum += mid2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Overall and per-clip frame-level AUC.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: f64,
    pub frames: usize,
    /// `None` where a clip has only one class.
    pub per_clip: Vec<(String, Option<f64>)>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("overall_auc = {:.6}\nframes = {}\n", self.overall, self.frames);
        for (clip, a) in &self.per_clip {
            match a {
                Some(a) => {
                    let _ = writeln!(out, "auc.{clip} = {a:.6}");
                }
                None => {
                    let _ = writeln!(out, "auc.{clip} = undefined");
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let per_clip: serde_json::Map<String, serde_json::Value> = self
            .per_clip
            .iter()
            .map(|(c, a)| (c.clone(), a.map_or(serde_json::Value::Null, |a| a.into())))
            .collect();
        let v = serde_json::json!({
            "overall_auc": self.overall,
            "frames": self.frames,
            "per_clip": per_clip,
        });
        serde_json::to_string_pretty(&v).expect("plain values") + "\n"
    }
}

/// Pairs timelines with labels on covered frames. With `fill`, uncovered
/// frames join with that score instead of being excluded.
pub fn evaluate(
    timelines: &[AnomalyTimeline],
    labels: &[FrameLabelTrack],
    fill: Option<f64>,
) -> Result<EvalReport> {
    let by_clip: BTreeMap<&str, &FrameLabelTrack> =
        labels.iter().map(|l| (l.clip_id.as_str(), l)).collect();
    let (mut all_s, mut all_l) = (Vec::new(), Vec::new());
    let mut per_clip = Vec::new();
    let mut shared = 0;
    for tl in timelines {
        let Some(track) = by_clip.get(tl.clip_id.as_str()) else {
            continue;
        };
        shared += 1;
        let (mut s, mut l) = (Vec::new(), Vec::new());
        for (f, &label) in track.labels.iter().enumerate() {
            let covered = tl.covered.get(f).copied().unwrap_or(false);
            let score = if covered {
                tl.scores[f]
            } else if let Some(v) = fill {
                v
            } else {
                continue;
            };
            s.push(score);
            l.push(label);
        }
        per_clip.push((tl.clip_id.clone(), auc(&s, &l).ok()));
        all_s.extend(s);
        all_l.extend(l);
    }
    if shared == 0 {
        return Err(Error::Config(
            "scores and labels share no clip ids".into(),
        ));
    }
    Ok(EvalReport {
        overall: auc(&all_s, &all_l)?,
        frames: all_s.len(),
        per_clip,
    })
}

/// `clip_id,frame,score,covered` rows. Uncovered frames appear only when
/// `fill` supplies their score.
pub fn scores_csv(timelines: &[AnomalyTimeline], fill: Option<f64>) -> String {
    let mut out = String::from("clip_id,frame,score,covered\n");
    for tl in timelines {
        for (f, (&s, &c)) in tl.scores.iter().zip(&tl.covered).enumerate() {
            match (c, fill) {
                (true, _) => {
                    let _ = writeln!(out, "{},{f},{s},1", tl.clip_id);
                }
                (false, Some(v)) => {
                    let _ = writeln!(out, "{},{f},{v},0", tl.clip_id);
                }
                (false, None) => {}
            }
        }
    }
    out
}

/// Parses a score CSV back into timelines. Every listed row counts as scored,
/// including filled rows marked uncovered.
pub fn parse_scores_csv(text: &str) -> Result<Vec<AnomalyTimeline>> {
    let mut clips: BTreeMap<String, BTreeMap<usize, (f64, bool)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || (i == 0 && line.starts_with("clip_id")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |msg: String| Error::Parse { line: line_no, msg };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 comma-separated fields, got {}", fields.len())));
        }
        let frame: usize = fields[1]
            .parse()
            .map_err(|e| bad(format!("bad frame `{}`: {e}", fields[1])))?;
        let score: f64 = fields[2]
            .parse()
            .map_err(|e| bad(format!("bad score `{}`: {e}", fields[2])))?;
        let covered = match fields[3] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("covered must be 0 or 1, got `{other}`"))),
        };
        if clips
            .entry(fields[0].to_string())
            .or_default()
            .insert(frame, (score, covered))
            .is_some()
        {
            return Err(bad(format!("duplicate row for clip {} frame {frame}", fields[0])));
        }
    }
    Ok(clips
        .into_iter()
        .map(|(clip_id, rows)| {
            let len = rows.keys().next_back().map_or(0, |f| f + 1);
            let mut scores = vec![0.0; len];
            let mut covered = vec![false; len];
            for (f, (s, _)) in rows {
                scores[f] = s;
                covered[f] = true;
            }
            AnomalyTimeline {
                clip_id,
                scores,
                covered,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{exp_origin, CenterStrategy, LatentPoint};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut good, mut ties, mut pairs) = (0.0, 0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        good += 1.0;
                    } else if scores[i] == scores[j] {
                        ties += 1.0;
                    }
                }
            }
        }
        (good + 0.5 * ties) / pairs
    }

    fn ws(agent: &str, start: i64, frames: usize, score: f64) -> WindowScore {
        WindowScore {
            clip_id: "c".into(),
            agent_id: agent.into(),
            start_frame: start,
            frames,
            score,
        }
    }

    #[test]
    fn hand_auc_cases() {
        let l = [false, false, true, true];
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedAuc)));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_counting(
            data in proptest::collection::vec((0u8..6, any::<bool>()), 2..50)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 * 0.1).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            match auc(&scores, &labels) {
                Ok(a) => {
                    prop_assert_eq!(a, pairwise_auc(&scores, &labels));
                    let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
                    prop_assert_eq!(auc(&exp, &labels).unwrap(), a);
                    let aff: Vec<f64> = scores.iter().map(|s| 3.0 * s - 7.0).collect();
                    prop_assert_eq!(auc(&aff, &labels).unwrap(), a);
                    let inv: Vec<f64> = scores.iter().map(|s| -s).collect();
                    prop_assert!((auc(&inv, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
                }
                Err(e) => prop_assert!(matches!(e, Error::UndefinedAuc)),
            }
        }

        #[test]
        fn frame_score_is_monotone(
            base in proptest::collection::vec(0.0f64..1.0, 3),
            who in 0usize..3,
            bump in 0.0f64..1.0,
        ) {
            let make = |s: &[f64]| {
                let w: Vec<WindowScore> = s
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| ws(&format!("p{i}"), i as i64, 4, x))
                    .collect();
                frame_timelines(&w, &BTreeMap::new()).remove(0)
            };
            let before = make(&base);
            let mut raised = base.clone();
            raised[who] += bump;
            let after = make(&raised);
            for (a, b) in after.scores.iter().zip(&before.scores) {
                prop_assert!(a >= b);
            }
        }
    }

    #[test]
    fn agent_mean_and_frame_max() {
        let w = vec![
            ws("a", 0, 3, 1.0),
            ws("a", 1, 3, 2.0),
            ws("a", 2, 3, 3.0),
            ws("b", 2, 3, 0.2),
            ws("b", 4, 3, 0.9),
        ];
        let agents = agent_frame_scores(&w);
        let a = &agents[&("c".to_string(), "a".to_string())];
        assert_eq!(a[&0], 1.0);
        assert_eq!(a[&2], 2.0);
        let tl = frame_timelines(&w, &BTreeMap::from([("c".to_string(), 9)]));
        assert_eq!(tl.len(), 1);
        assert_eq!(tl[0].scores[2], 2.0);
        assert_eq!(tl[0].scores[6], 0.9);
        assert_eq!(tl[0].covered, vec![true, true, true, true, true, true, true, false, false]);
    }

    #[test]
    fn fourteen_frame_coverage() {
        // window starts 0, 1, 2 with T = 12
        let w: Vec<WindowScore> = (0..3).map(|s| ws("a", s, 12, s as f64 + 1.0)).collect();
        let tl = frame_timelines(&w, &BTreeMap::new()).remove(0);
        assert_eq!(tl.scores[12], 2.5);
        assert_eq!(tl.scores[0], 1.0);
        assert_eq!(tl.scores[13], 3.0);
        // brute-force membership
        for f in 0..14 {
            let members: Vec<f64> = w.iter().filter(|x| x.contains(f)).map(|x| x.score).collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            assert_eq!(tl.scores[f as usize], mean);
        }
    }

    #[test]
    fn window_score_kinds() {
        let center = CenterState {
            point: LatentPoint::new(Manifold::Hyperbolic, vec![0.0, 0.0]).unwrap(),
            strategy: CenterStrategy::Dynamic,
        };
        let v = [0.5f64.atanh(), 0.0];
        let inf = Inference {
            latent: exp_origin(&v),
            reconstruction: Some(0.25),
        };
        let d = window_score(&inf, &center, ScoreKind::Distance).unwrap();
        assert!((d - 1.0986122886681098).abs() < 1e-9);
        assert_eq!(window_score(&inf, &center, ScoreKind::Reconstruction).unwrap(), 0.25);
        assert_eq!(window_score(&inf, &center, ScoreKind::Combined).unwrap(), d + 0.25);

        let sphere = CenterState {
            point: LatentPoint::new(Manifold::Spherical, vec![1.0, 0.0]).unwrap(),
            strategy: CenterStrategy::Dynamic,
        };
        assert!(matches!(
            window_score(&inf, &sphere, ScoreKind::Distance),
            Err(Error::State(_))
        ));
        let x = Manifold::Spherical.embed(&[0.6, 0.8]).unwrap();
        let s = window_score(
            &Inference { latent: x, reconstruction: None },
            &sphere,
            ScoreKind::Distance,
        )
        .unwrap();
        assert!((s - 0.4).abs() < 1e-15);
        let no_rec = Inference {
            latent: exp_origin(&v),
            reconstruction: None,
        };
        assert!(window_score(&no_rec, &center, ScoreKind::Reconstruction).is_err());
    }

    #[test]
    fn csv_round_trip_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tl = vec![AnomalyTimeline {
            clip_id: "c".into(),
            scores: (0..6).map(|_| rng.random::<f64>()).collect(),
            covered: vec![true, true, false, true, true, true],
        }];
        let text = scores_csv(&tl, None);
        assert_eq!(text.lines().count(), 1 + 5);
        let mut back = parse_scores_csv(&text).unwrap();
        back[0].scores[2] = tl[0].scores[2];
        assert_eq!(back, tl);
        let filled = parse_scores_csv(&scores_csv(&tl, Some(0.5))).unwrap();
        assert!(filled[0].covered.iter().all(|&c| c));
        assert_eq!(filled[0].scores[2], 0.5);
        let labels = vec![FrameLabelTrack {
            clip_id: "c".into(),
            labels: vec![false, false, true, true, false, true],
        }];
        let r = evaluate(&tl, &labels, None).unwrap();
        assert_eq!(r.frames, 5);
        assert!(r.to_text().starts_with("overall_auc = "));
        let other = vec![FrameLabelTrack {
            clip_id: "d".into(),
            labels: vec![false, true],
        }];
        assert!(matches!(evaluate(&tl, &other, None), Err(Error::Config(_))));
        assert_eq!(evaluate(&tl, &labels, Some(0.5)).unwrap().frames, 6);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
