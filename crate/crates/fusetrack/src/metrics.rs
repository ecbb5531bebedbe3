//! CLEAR-MOT-style counting and the MOTA / MOTAR / AMOTA evaluation.
//!
//! Frame matching pairs ground-truth boxes with hypothesis boxes by 2D
//! center distance under a 2 m gate, preferring continuation of the previous
//! frame's (identity -> track id) pairing before distance-greedy matching of
//! the remainder. An identity switch is counted whenever a ground-truth
//! identity matches a different track id than in its most recent matched
//! frame.
//!
//! AMOTA averages MOTAR over `n - 1` evenly spaced recall targets; at each
//! target the highest confidence threshold whose achieved recall reaches the
//! target is evaluated. MOTAR is clamped into `[0, 1]`: the lower clamp is
//! part of its definition, and the upper clamp covers thresholds whose
//! quantized achieved recall overshoots the target.

use std::collections::BTreeMap;

use crate::types::{ClassId, GtBox, TrackId, TrackRecord};
use crate::{Error, Result};

/// Center-distance gate (meters) for gt/hypothesis matching.
pub const MATCH_GATE_M: f64 = 2.0;

/// Number of recall sample points (`n`); AMOTA averages `n - 1` values.
pub const AMOTA_SAMPLE_POINTS: usize = 40;

/// Accumulated CLEAR-MOT counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub id_switches: usize,
    pub gt_positives: usize,
}

impl std::ops::AddAssign for FrameCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.true_positives += rhs.true_positives;
        self.false_positives += rhs.false_positives;
        self.false_negatives += rhs.false_negatives;
        self.id_switches += rhs.id_switches;
        self.gt_positives += rhs.gt_positives;
    }
}

/// One hypothesis box in a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hypothesis {
    pub id: TrackId,
    pub center: (f64, f64),
}

impl Hypothesis {
    pub fn from_record(r: &TrackRecord) -> Self {
        Hypothesis {
            id: r.id,
            center: r.center2d(),
        }
    }
}

/// Tracks which hypothesis id each ground-truth identity last matched.
#[derive(Debug, Clone, Default)]
pub struct MatchState {
    last_id: BTreeMap<u64, TrackId>,
}

/// Match one frame of a single class and return its count contribution.
pub fn match_frame(
    gt: &[GtBox],
    hyps: &[Hypothesis],
    gate: f64,
    state: &mut MatchState,
) -> FrameCounts {
    let mut gt_used = vec![false; gt.len()];
    let mut hyp_used = vec![false; hyps.len()];
    let mut assigned: Vec<(usize, usize)> = Vec::new();

    // continuation pass: keep last frame's pairing when still plausible
    let mut continuation: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        let Some(&prev_id) = state.last_id.get(&g.identity) else {
            continue;
        };
        let Some(hi) = hyps.iter().position(|h| h.id == prev_id) else {
            continue;
        };
        let d = crate::types::dist2d(g.center2d(), hyps[hi].center);
        if d < gate {
            continuation.push((d, gi, hi));
        }
    }
    continuation.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (_, gi, hi) in continuation {
        if gt_used[gi] || hyp_used[hi] {
            continue;
        }
        gt_used[gi] = true;
        hyp_used[hi] = true;
        assigned.push((gi, hi));
    }

    // distance-greedy pass over the remainder
    let mut rest: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        if gt_used[gi] {
            continue;
        }
        for (hi, h) in hyps.iter().enumerate() {
            if hyp_used[hi] {
                continue;
            }
            let d = crate::types::dist2d(g.center2d(), h.center);
            if d < gate {
                rest.push((d, gi, hi));
            }
        }
    }
    rest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, gi, hi) in rest {
        if gt_used[gi] || hyp_used[hi] {
            continue;
        }
        gt_used[gi] = true;
        hyp_used[hi] = true;
        assigned.push((gi, hi));
    }

    let mut counts = FrameCounts {
        gt_positives: gt.len(),
        ..Default::default()
    };
    counts.true_positives = assigned.len();
    counts.false_negatives = gt.len() - assigned.len();
    counts.false_positives = hyps.len() - assigned.len();
    for (gi, hi) in assigned {
        let identity = gt[gi].identity;
        let id = hyps[hi].id;
        if let Some(&prev) = state.last_id.get(&identity) {
            if prev != id {
                counts.id_switches += 1;
            }
        }
        state.last_id.insert(identity, id);
    }
    counts
}

/// `MOTA = 1 - (IDS + FP + FN) / P`. May be negative; not clamped.
pub fn mota(counts: &FrameCounts) -> Result<f64> {
    if counts.gt_positives == 0 {
        return Err(Error::Config("mota: no ground-truth positives".into()));
    }
    let errors =
        (counts.id_switches + counts.false_positives + counts.false_negatives) as f64;
    Ok(1.0 - errors / counts.gt_positives as f64)
}

/// Recall-normalized accuracy at recall target `r`, clamped into `[0, 1]`.
pub fn motar(counts: &FrameCounts, r: f64) -> Result<f64> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Config(format!("motar: recall {r} outside (0,1]")));
    }
    if counts.gt_positives == 0 {
        return Err(Error::Config("motar: no ground-truth positives".into()));
    }
    let p = counts.gt_positives as f64;
    let errors =
        (counts.id_switches + counts.false_positives + counts.false_negatives) as f64;
    let raw = 1.0 - (errors - (1.0 - r) * p) / (r * p);
    Ok(raw.clamp(0.0, 1.0))
}

/// One evaluated recall target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallPoint {
    /// Target recall `k / (n - 1)`.
    pub recall: f64,
    /// Confidence threshold evaluated there (NaN when unreachable).
    pub threshold: f64,
    pub motar: f64,
}

/// Counts over a whole sequence for one filtered hypothesis set.
fn sweep_counts(
    gt_frames: &[Vec<GtBox>],
    hyp_frames: &BTreeMap<usize, Vec<Hypothesis>>,
) -> FrameCounts {
    let n_frames = gt_frames
        .len()
        .max(hyp_frames.keys().next_back().map_or(0, |&f| f + 1));
    let mut state = MatchState::default();
    let mut total = FrameCounts::default();
    let empty_gt: Vec<GtBox> = Vec::new();
    let empty_hyp: Vec<Hypothesis> = Vec::new();
    for frame in 0..n_frames {
        let gt = gt_frames.get(frame).unwrap_or(&empty_gt);
        let hyps = hyp_frames.get(&frame).unwrap_or(&empty_hyp);
        total += match_frame(gt, hyps, MATCH_GATE_M, &mut state);
    }
    total
}

/// Evaluation of one class over one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub amota: f64,
    /// MOTA at the best confidence threshold.
    pub mota: f64,
    /// Counts with every hypothesis kept.
    pub counts: FrameCounts,
    pub recall_points: Vec<RecallPoint>,
}

/// AMOTA plus the per-recall table for one class.
///
/// `tracks` and `gt_frames` must already be filtered to a single class.
pub fn amota(
    tracks: &[TrackRecord],
    gt_frames: &[Vec<GtBox>],
    n_sample_points: usize,
) -> Result<ClassReport> {
    let p_total: usize = gt_frames.iter().map(|f| f.len()).sum();
    if p_total == 0 {
        return Err(Error::Config("amota: no ground-truth boxes".into()));
    }
    if n_sample_points < 2 {
        return Err(Error::Config("amota: need at least 2 sample points".into()));
    }

    // candidate thresholds: unique scores, descending
    let mut thresholds: Vec<f64> = tracks.iter().map(|t| t.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    // counts and achieved recall per threshold
    let mut evaluated: Vec<(f64, FrameCounts, f64)> = Vec::with_capacity(thresholds.len());
    for &theta in &thresholds {
        let hyp_frames = hypotheses_by_frame(tracks, Some(theta));
        let counts = sweep_counts(gt_frames, &hyp_frames);
        let recall = counts.true_positives as f64 / p_total as f64;
        evaluated.push((theta, counts, recall));
    }

    let denom = (n_sample_points - 1) as f64;
    let mut recall_points = Vec::with_capacity(n_sample_points - 1);
    let mut sum = 0.0;
    for k in 1..n_sample_points {
        let r = k as f64 / denom;
        // thresholds are scanned from the highest down; the first with
        // achieved recall >= r is the highest such threshold
        let hit = evaluated.iter().find(|(_, _, recall)| *recall >= r);
        let point = match hit {
            Some((theta, counts, _)) => RecallPoint {
                recall: r,
                threshold: *theta,
                motar: motar(counts, r)?,
            },
            None => RecallPoint {
                recall: r,
                threshold: f64::NAN,
                motar: 0.0,
            },
        };
        sum += point.motar;
        recall_points.push(point);
    }
    let amota = sum / denom;

    // best-threshold MOTA and full counts
    let full_hyps = hypotheses_by_frame(tracks, None);
    let full_counts = sweep_counts(gt_frames, &full_hyps);
    let best_mota = evaluated
        .iter()
        .map(|(_, counts, _)| mota(counts))
        .chain(std::iter::once(mota(&full_counts)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(ClassReport {
        amota,
        mota: best_mota,
        counts: full_counts,
        recall_points,
    })
}

fn hypotheses_by_frame(
    tracks: &[TrackRecord],
    threshold: Option<f64>,
) -> BTreeMap<usize, Vec<Hypothesis>> {
    let mut out: BTreeMap<usize, Vec<Hypothesis>> = BTreeMap::new();
    for t in tracks {
        if let Some(theta) = threshold {
            if t.score < theta {
                continue;
            }
        }
        out.entry(t.frame).or_default().push(Hypothesis::from_record(t));
    }
    out
}

/// Full evaluation: per-class AMOTA/MOTA plus an unweighted class mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: BTreeMap<ClassId, ClassReport>,
    pub overall_amota: f64,
    pub overall_mota: f64,
}

/// Evaluate a track file against ground truth. Classes default to every
/// class present in the ground truth; metrics are computed per class and
/// averaged unweighted.
pub fn evaluate(
    tracks: &[TrackRecord],
    gt_frames: &[Vec<GtBox>],
    classes: Option<&[ClassId]>,
    n_sample_points: usize,
) -> Result<MetricsReport> {
    let class_list: Vec<ClassId> = match classes {
        Some(cs) => cs.to_vec(),
        None => {
            let mut set: Vec<ClassId> = gt_frames
                .iter()
                .flatten()
                .map(|g| g.class_id)
                .collect();
            set.sort_unstable();
            set.dedup();
            set
        }
    };
    if class_list.is_empty() {
        return Err(Error::Config("evaluate: no ground-truth classes".into()));
    }

    let mut per_class = BTreeMap::new();
    for &class_id in &class_list {
        let class_tracks: Vec<TrackRecord> = tracks
            .iter()
            .filter(|t| t.class_id == class_id)
            .cloned()
            .collect();
        let class_gt: Vec<Vec<GtBox>> = gt_frames
            .iter()
            .map(|f| {
                f.iter()
                    .filter(|g| g.class_id == class_id)
                    .copied()
                    .collect()
            })
            .collect();
        let report = amota(&class_tracks, &class_gt, n_sample_points)
            .map_err(|e| Error::Config(format!("class {class_id}: {e}")))?;
        per_class.insert(class_id, report);
    }

    let n = per_class.len() as f64;
    let overall_amota = per_class.values().map(|c| c.amota).sum::<f64>() / n;
    let overall_mota = per_class.values().map(|c| c.mota).sum::<f64>() / n;
    Ok(MetricsReport {
        per_class,
        overall_amota,
        overall_mota,
    })
}
