//! Domain types shared by all modules.
//!
//! State and observation vector layouts are fixed so the observation model
//! is a constant selector matrix:
//!
//! state:       `(x, y, z, a, l, w, h, d_x, d_y, d_z, d_a)` (11 components)
//! observation: `(x, y, z, a, l, w, h, d_x, d_y)`           (9 components)
//!
//! Positions and sizes are meters, `a` is the heading in radians wrapped to
//! `(-pi, pi]`, and the `d_*` components are per-frame differences.

use nalgebra::{SMatrix, SVector};

use crate::linalg::{self, wrap_angle};
use crate::{Error, Result};

pub const STATE_DIM: usize = 11;
pub const OBS_DIM: usize = 9;

/// Index of the heading component in both state and observation vectors.
pub const ANGLE_IDX: usize = 3;

pub type StateVec = SVector<f64, STATE_DIM>;
pub type StateMat = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type ObsVec = SVector<f64, OBS_DIM>;
pub type ObsMat = SMatrix<f64, OBS_DIM, OBS_DIM>;
pub type ObsStateMat = SMatrix<f64, OBS_DIM, STATE_DIM>;

/// Object class label.
pub type ClassId = u32;

/// Track identity, unique within one tracking run.
pub type TrackId = u64;

/// Full 11-component object state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub a: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub d_x: f64,
    pub d_y: f64,
    pub d_z: f64,
    pub d_a: f64,
}

impl BoxState {
    /// Validating constructor: sizes must be positive, heading wrapped.
    pub fn new(v: StateVec) -> Result<Self> {
        let s = Self::from_vector_clamped(v);
        if v[4] <= 0.0 || v[5] <= 0.0 || v[6] <= 0.0 {
            return Err(Error::Numerics(format!(
                "box sizes must be positive, got l={} w={} h={}",
                v[4], v[5], v[6]
            )));
        }
        for (i, c) in v.iter().enumerate() {
            if !c.is_finite() {
                return Err(Error::Numerics(format!(
                    "box state component {i} is not finite"
                )));
            }
        }
        Ok(s)
    }

    /// Build from a raw mean vector, wrapping the heading and flooring sizes
    /// at a small positive value. Used when reporting filtered states, whose
    /// means are unconstrained.
    pub fn from_vector_clamped(v: StateVec) -> Self {
        const MIN_SIZE: f64 = 1e-3;
        BoxState {
            x: v[0],
            y: v[1],
            z: v[2],
            a: linalg::wrap(v[3]),
            l: v[4].max(MIN_SIZE),
            w: v[5].max(MIN_SIZE),
            h: v[6].max(MIN_SIZE),
            d_x: v[7],
            d_y: v[8],
            d_z: v[9],
            d_a: v[10],
        }
    }

    pub fn to_vector(&self) -> StateVec {
        StateVec::from_column_slice(&[
            self.x, self.y, self.z, self.a, self.l, self.w, self.h, self.d_x, self.d_y, self.d_z,
            self.d_a,
        ])
    }

    pub fn center2d(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

/// 9-component detector observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub a: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub d_x: f64,
    pub d_y: f64,
}

impl Observation {
    pub fn new(v: ObsVec) -> Result<Self> {
        if v[4] <= 0.0 || v[5] <= 0.0 || v[6] <= 0.0 {
            return Err(Error::Numerics(format!(
                "observation sizes must be positive, got l={} w={} h={}",
                v[4], v[5], v[6]
            )));
        }
        let a = wrap_angle(v[3])?;
        for c in v.iter() {
            if !c.is_finite() {
                return Err(Error::Numerics("observation component not finite".into()));
            }
        }
        Ok(Observation {
            x: v[0],
            y: v[1],
            z: v[2],
            a,
            l: v[4],
            w: v[5],
            h: v[6],
            d_x: v[7],
            d_y: v[8],
        })
    }

    pub fn to_vector(&self) -> ObsVec {
        ObsVec::from_column_slice(&[
            self.x, self.y, self.z, self.a, self.l, self.w, self.h, self.d_x, self.d_y,
        ])
    }

    pub fn center2d(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

/// Gaussian state estimate: mean plus covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: StateVec,
    pub cov: StateMat,
}

impl GaussianBelief {
    /// Validating constructor: covariance must be symmetric within 1e-9 and
    /// have no eigenvalue below -1e-9.
    pub fn new(mean: StateVec, cov: StateMat) -> Result<Self> {
        let b = GaussianBelief { mean, cov };
        b.validate()?;
        Ok(b)
    }

    /// Internal constructor for the filter hot path: symmetrizes but defers
    /// the eigenvalue check to tests and callers of [`validate`].
    ///
    /// [`validate`]: GaussianBelief::validate
    pub(crate) fn from_parts_symmetrized(mean: StateVec, mut cov: StateMat) -> Self {
        for i in 0..STATE_DIM {
            for j in (i + 1)..STATE_DIM {
                let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        GaussianBelief { mean, cov }
    }

    pub fn validate(&self) -> Result<()> {
        for c in self.mean.iter() {
            if !c.is_finite() {
                return Err(Error::Numerics("belief mean not finite".into()));
            }
        }
        for i in 0..STATE_DIM {
            for j in (i + 1)..STATE_DIM {
                if (self.cov[(i, j)] - self.cov[(j, i)]).abs() > 1e-9 {
                    return Err(Error::Numerics(format!(
                        "belief covariance asymmetric at ({i},{j})"
                    )));
                }
            }
        }
        let d = nalgebra::DMatrix::from_iterator(STATE_DIM, STATE_DIM, self.cov.iter().copied());
        let min_eig = linalg::min_symmetric_eigenvalue(&d);
        if min_eig < -1e-9 {
            return Err(Error::Numerics(format!(
                "belief covariance not PSD: min eigenvalue {min_eig:e}"
            )));
        }
        Ok(())
    }
}

/// Feature payload sizes carried by detections. The defaults match the
/// full-scale configuration (1024-dim appearance vector plus a 6-slot camera
/// one-hot, and a 512x3x3 geometric feature); the simulator uses reduced
/// dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureDims {
    pub feat2d: usize,
    pub feat3d_channels: usize,
}

impl FeatureDims {
    pub const SPATIAL: usize = 3;

    pub fn feat3d_len(&self) -> usize {
        self.feat3d_channels * Self::SPATIAL * Self::SPATIAL
    }
}

impl Default for FeatureDims {
    fn default() -> Self {
        FeatureDims {
            feat2d: 1024 + 6,
            feat3d_channels: 512,
        }
    }
}

/// One detector output: observation, class, confidence, and the two feature
/// payloads (appearance vector and channels-first 3x3 geometric tensor).
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub obs: Observation,
    pub class_id: ClassId,
    pub confidence: f64,
    pub feat2d: Vec<f64>,
    /// Row-major `[channels, 3, 3]`.
    pub feat3d: Vec<f64>,
    pub frame: usize,
}

impl Detection {
    pub fn validate(&self, dims: &FeatureDims) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Numerics(format!(
                "detection confidence {} outside [0,1]",
                self.confidence
            )));
        }
        if self.feat2d.len() != dims.feat2d {
            return Err(Error::Config(format!(
                "detection feat2d has {} values, configured dim is {}",
                self.feat2d.len(),
                dims.feat2d
            )));
        }
        if self.feat3d.len() != dims.feat3d_len() {
            return Err(Error::Config(format!(
                "detection feat3d has {} values, configured dim is {}",
                self.feat3d.len(),
                dims.feat3d_len()
            )));
        }
        Ok(())
    }
}

/// A live track: identity, belief, latest fused feature, life-cycle
/// counters, and a confidence score used by the recall sweep at evaluation.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: TrackId,
    pub class_id: ClassId,
    pub belief: GaussianBelief,
    /// Fused feature of the most recently matched detection (empty when the
    /// tracker runs without nets).
    pub fused_feat: Vec<f64>,
    pub hits: u32,
    pub consecutive_misses: u32,
    pub score: f64,
}

/// One ground-truth box: persistent identity, class, 11-component state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub identity: u64,
    pub class_id: ClassId,
    pub state: StateVec,
}

impl GtBox {
    pub fn center2d(&self) -> (f64, f64) {
        (self.state[0], self.state[1])
    }
}

/// One row of a track file: where a track was reported at a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub frame: usize,
    pub id: TrackId,
    pub class_id: ClassId,
    pub state: StateVec,
    pub score: f64,
}

impl TrackRecord {
    pub fn center2d(&self) -> (f64, f64) {
        (self.state[0], self.state[1])
    }
}

pub(crate) fn dist2d(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_state_round_trips_through_vector() {
        let v = StateVec::from_column_slice(&[
            1.0, 2.0, 0.5, 0.3, 4.5, 2.0, 1.6, 0.2, -0.1, 0.0, 0.01,
        ]);
        let b = BoxState::new(v).unwrap();
        assert_eq!(b.to_vector(), v);
    }

    #[test]
    fn box_state_rejects_nonpositive_sizes() {
        let mut v = StateVec::zeros();
        v[4] = 0.0;
        v[5] = 1.0;
        v[6] = 1.0;
        assert!(BoxState::new(v).is_err());
    }

    #[test]
    fn clamped_constructor_wraps_and_floors() {
        let mut v = StateVec::zeros();
        v[3] = 4.0 * std::f64::consts::PI + 0.1;
        v[4] = -3.0;
        v[5] = 1.0;
        v[6] = 1.0;
        let b = BoxState::from_vector_clamped(v);
        assert!(b.a > -std::f64::consts::PI && b.a <= std::f64::consts::PI);
        assert!(b.l > 0.0);
    }

    #[test]
    fn belief_rejects_asymmetric_cov() {
        let mut cov = StateMat::identity();
        cov[(0, 1)] = 0.5;
        assert!(GaussianBelief::new(StateVec::zeros(), cov).is_err());
    }

    #[test]
    fn belief_rejects_indefinite_cov() {
        let mut cov = StateMat::identity();
        cov[(0, 0)] = -1.0;
        assert!(GaussianBelief::new(StateVec::zeros(), cov).is_err());
    }

    #[test]
    fn detection_validation_checks_dims() {
        let dims = FeatureDims {
            feat2d: 4,
            feat3d_channels: 2,
        };
        let obs = Observation::new(ObsVec::from_column_slice(&[
            0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0,
        ]))
        .unwrap();
        let det = Detection {
            obs,
            class_id: 0,
            confidence: 0.9,
            feat2d: vec![0.0; 4],
            feat3d: vec![0.0; 18],
            frame: 0,
        };
        assert!(det.validate(&dims).is_ok());
        let mut bad = det.clone();
        bad.feat2d = vec![0.0; 3];
        assert!(bad.validate(&dims).is_err());
    }
}
