//! Track creation and termination policies.
//!
//! Initialization is either unconditional, count-based (provisional tracks
//! promoted after `k` consecutive matches, dropped if they miss before
//! promotion), or gated by a learned per-detection score thresholded at 0.5.
//! Termination drops tracks whose consecutive-miss streak exceeds a cap.

use crate::types::{Track, TrackId};
use crate::{Error, Result};

/// How unmatched detections become tracks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    /// Every unmatched detection starts a confirmed track.
    Always,
    /// Unmatched detections start provisional tracks, confirmed after `k`
    /// consecutive matches; only confirmed tracks are reported.
    CountBased { k: u32 },
    /// Initialize only detections whose learned score exceeds the threshold.
    Learned { threshold: f64 },
}

impl InitMode {
    pub fn learned_default() -> Self {
        InitMode::Learned { threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifecyclePolicy {
    pub init_mode: InitMode,
    pub max_consecutive_misses: u32,
}

impl Default for LifecyclePolicy {
    fn default() -> Self {
        LifecyclePolicy {
            init_mode: InitMode::Always,
            max_consecutive_misses: 3,
        }
    }
}

impl LifecyclePolicy {
    pub fn validate(&self) -> Result<()> {
        match self.init_mode {
            InitMode::CountBased { k } if k < 1 => {
                Err(Error::Config("count-based init requires k >= 1".into()))
            }
            InitMode::Learned { threshold } if !(threshold > 0.0 && threshold < 1.0) => Err(
                Error::Config(format!("learned init threshold {threshold} outside (0,1)")),
            ),
            _ => Ok(()),
        }
    }
}

/// Exponential-moving-average weight applied to the newest matched detection
/// confidence when refreshing a track score.
pub const SCORE_EMA_WEIGHT: f64 = 0.7;

/// Multiplicative score decay applied per missed frame.
pub const SCORE_MISS_DECAY: f64 = 0.9;

pub fn refreshed_score(old: f64, confidence: f64) -> f64 {
    SCORE_EMA_WEIGHT * confidence + (1.0 - SCORE_EMA_WEIGHT) * old
}

pub fn decayed_score(old: f64) -> f64 {
    old * SCORE_MISS_DECAY
}

/// Select which unmatched detections (given by index) get a new track.
/// `scores` must be present and aligned with `unmatched` in learned mode.
pub fn decide_init(
    unmatched: &[usize],
    scores: Option<&[f64]>,
    policy: &LifecyclePolicy,
) -> Result<Vec<usize>> {
    match policy.init_mode {
        InitMode::Always | InitMode::CountBased { .. } => Ok(unmatched.to_vec()),
        InitMode::Learned { threshold } => {
            let scores = scores.ok_or_else(|| {
                Error::Config("learned init mode requires per-detection scores".into())
            })?;
            if scores.len() != unmatched.len() {
                return Err(Error::Config(format!(
                    "learned init: {} scores for {} unmatched detections",
                    scores.len(),
                    unmatched.len()
                )));
            }
            Ok(unmatched
                .iter()
                .zip(scores)
                .filter(|&(_, &p)| p > threshold)
                .map(|(&i, _)| i)
                .collect())
        }
    }
}

/// A track is reported only once confirmed. Under count-based init a track
/// is provisional until it has accumulated `k` consecutive matches;
/// provisional tracks are dropped at their first miss, so `hits >= k` is the
/// confirmation predicate.
pub fn is_confirmed(track: &Track, policy: &LifecyclePolicy) -> bool {
    match policy.init_mode {
        InitMode::CountBased { k } => track.hits >= k,
        _ => true,
    }
}

/// Ids of tracks to drop: miss streak over the cap, or provisional tracks
/// that missed before confirmation.
pub fn decide_terminate(tracks: &[Track], policy: &LifecyclePolicy) -> Vec<TrackId> {
    tracks
        .iter()
        .filter(|t| {
            t.consecutive_misses > policy.max_consecutive_misses
                || (!is_confirmed(t, policy) && t.consecutive_misses > 0)
        })
        .map(|t| t.id)
        .collect()
}
