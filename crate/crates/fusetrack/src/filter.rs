//! Kalman filter prediction/update for the 11-component state, plus
//! data-driven estimation of the process and observation noise covariances.
//!
//! The motion model is constant velocity: positions and heading advance by
//! their per-frame differences, everything else is carried over. The
//! observation model is a fixed selector of the first nine state components.
//! Noise covariances are diagonal and estimated per class from residual
//! statistics of labeled sequences.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::linalg::{self, CholFactor};
use crate::types::{
    ClassId, Detection, GaussianBelief, GtBox, Observation, ObsMat, ObsStateMat, ObsVec, StateMat,
    StateVec, ANGLE_IDX, OBS_DIM, STATE_DIM,
};
use crate::{Error, Result};

/// State transition matrix plus process noise.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionModel {
    pub a: StateMat,
    pub q: StateMat,
}

impl MotionModel {
    /// Constant-velocity transition with the given process noise.
    pub fn constant_velocity(q: StateMat) -> Self {
        MotionModel {
            a: transition_matrix(),
            q,
        }
    }
}

/// Constant-velocity state transition: x += d_x, y += d_y, z += d_z,
/// a += d_a; all other components identity.
pub fn transition_matrix() -> StateMat {
    let mut a = StateMat::identity();
    a[(0, 7)] = 1.0; // x += d_x
    a[(1, 8)] = 1.0; // y += d_y
    a[(2, 9)] = 1.0; // z += d_z
    a[(3, 10)] = 1.0; // a += d_a
    a
}

/// Selector observation matrix plus observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub h: ObsStateMat,
    pub r: ObsMat,
}

impl ObservationModel {
    pub fn selector(r: ObsMat) -> Self {
        ObservationModel {
            h: selector_matrix(),
            r,
        }
    }
}

/// H selects `(x, y, z, a, l, w, h, d_x, d_y)` from the state.
pub fn selector_matrix() -> ObsStateMat {
    let mut h = ObsStateMat::zeros();
    for i in 0..OBS_DIM {
        h[(i, i)] = 1.0;
    }
    h
}

/// Per-class diagonal process/observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassNoise {
    pub q_diag: [f64; STATE_DIM],
    pub r_diag: [f64; OBS_DIM],
}

impl ClassNoise {
    pub fn motion_model(&self) -> MotionModel {
        MotionModel::constant_velocity(StateMat::from_diagonal(&StateVec::from_column_slice(
            &self.q_diag,
        )))
    }

    pub fn observation_model(&self) -> ObservationModel {
        ObservationModel::selector(ObsMat::from_diagonal(&ObsVec::from_column_slice(
            &self.r_diag,
        )))
    }
}

/// Estimated noise per tracked class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoiseSuite {
    pub classes: BTreeMap<ClassId, ClassNoise>,
}

impl NoiseSuite {
    pub fn get(&self, class_id: ClassId) -> Result<&ClassNoise> {
        self.classes.get(&class_id).ok_or_else(|| {
            Error::Config(format!("noise suite has no entry for class {class_id}"))
        })
    }
}

/// Prediction step: mean through the transition (heading wrapped), covariance
/// propagated and symmetrized.
pub fn predict(belief: &GaussianBelief, model: &MotionModel) -> GaussianBelief {
    let mut mean = model.a * belief.mean;
    mean[ANGLE_IDX] = linalg::wrap(mean[ANGLE_IDX]);
    let cov = model.a * belief.cov * model.a.transpose() + model.q;
    GaussianBelief::from_parts_symmetrized(mean, cov)
}

/// Predicted observation and innovation covariance for an already-predicted
/// belief. `S = H P H^T + R` is forced positive definite by an epsilon jitter
/// when the plain sum is not; if it is still not factorizable the call fails.
pub fn predict_observation(
    belief: &GaussianBelief,
    model: &ObservationModel,
) -> Result<(Observation, ObsMat)> {
    let o_hat = model.h * belief.mean;
    let mut s = model.h * belief.cov * model.h.transpose() + model.r;
    for i in 0..OBS_DIM {
        for j in (i + 1)..OBS_DIM {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    if chol_of_obs(&s).is_err() {
        for i in 0..OBS_DIM {
            s[(i, i)] += 1e-9;
        }
        chol_of_obs(&s).map_err(|_| {
            Error::Numerics("innovation covariance singular after jitter".to_string())
        })?;
    }
    let obs = Observation::new(o_hat)
        .unwrap_or_else(|_| observation_clamped(&o_hat));
    Ok((obs, s))
}

fn chol_of_obs(s: &ObsMat) -> Result<CholFactor> {
    let d = DMatrix::from_iterator(OBS_DIM, OBS_DIM, s.iter().copied());
    CholFactor::new(&d)
}

/// Predicted means can have non-positive sizes when the state is still far
/// from any observation; clamp them so the value stays representable.
fn observation_clamped(v: &ObsVec) -> Observation {
    const MIN_SIZE: f64 = 1e-3;
    Observation {
        x: v[0],
        y: v[1],
        z: v[2],
        a: linalg::wrap(v[3]),
        l: v[4].max(MIN_SIZE),
        w: v[5].max(MIN_SIZE),
        h: v[6].max(MIN_SIZE),
        d_x: v[7],
        d_y: v[8],
    }
}

/// Innovation `o - H mu` with the heading residual wrapped.
pub fn innovation(belief: &GaussianBelief, obs: &Observation, model: &ObservationModel) -> ObsVec {
    let mut nu = obs.to_vector() - model.h * belief.mean;
    nu[ANGLE_IDX] = linalg::wrap(nu[ANGLE_IDX]);
    nu
}

/// Measurement update in Joseph form. The posterior covariance stays
/// symmetric PSD; the posterior heading is re-wrapped.
pub fn update(
    belief: &GaussianBelief,
    obs: &Observation,
    model: &ObservationModel,
) -> Result<GaussianBelief> {
    let nu = innovation(belief, obs, model);

    let s = model.h * belief.cov * model.h.transpose() + model.r;
    let s_dyn = DMatrix::from_iterator(OBS_DIM, OBS_DIM, s.iter().copied());
    let chol = CholFactor::new(&s_dyn)
        .map_err(|e| Error::Numerics(format!("kalman update: {e}")))?;

    // K = P H^T S^-1, computed as K^T = S^-1 (H P).
    let hp = model.h * belief.cov; // 9 x 11
    let hp_dyn = DMatrix::from_iterator(OBS_DIM, STATE_DIM, hp.iter().copied());
    let kt_dyn = chol.solve_mat(&hp_dyn); // 9 x 11
    let mut k = nalgebra::SMatrix::<f64, STATE_DIM, OBS_DIM>::zeros();
    for i in 0..STATE_DIM {
        for j in 0..OBS_DIM {
            k[(i, j)] = kt_dyn[(j, i)];
        }
    }

    let mut mean = belief.mean + k * nu;
    mean[ANGLE_IDX] = linalg::wrap(mean[ANGLE_IDX]);

    // Joseph form: (I - K H) P (I - K H)^T + K R K^T.
    let i_kh = StateMat::identity() - k * model.h;
    let cov = i_kh * belief.cov * i_kh.transpose() + k * model.r * k.transpose();

    Ok(GaussianBelief::from_parts_symmetrized(mean, cov))
}

/// Initial belief for a track born from a detection: mean copies the
/// observation with zero `d_z`, `d_a`; covariance is the class observation
/// noise expanded to state size, with the unobserved velocity slots set to
/// ten times the class process noise.
pub fn new_track_belief(det: &Observation, noise: &ClassNoise) -> GaussianBelief {
    let mut mean = StateVec::zeros();
    let o = det.to_vector();
    for i in 0..OBS_DIM {
        mean[i] = o[i];
    }
    let mut diag = StateVec::zeros();
    for i in 0..OBS_DIM {
        diag[i] = noise.r_diag[i];
    }
    diag[9] = noise.q_diag[9] * 10.0;
    diag[10] = noise.q_diag[10] * 10.0;
    GaussianBelief {
        mean,
        cov: StateMat::from_diagonal(&diag),
    }
}

/// One labeled sequence: per-frame ground-truth states and the detections
/// observed at each frame.
#[derive(Debug, Clone, Default)]
pub struct LabeledSequence {
    pub gt: Vec<Vec<GtBox>>,
    pub detections: Vec<Vec<Detection>>,
}

/// Gate used when pairing detections with ground-truth boxes for the
/// observation-noise statistics.
pub const NOISE_MATCH_GATE_M: f64 = 2.0;

/// Estimate per-class diagonal `Q` and `R` from labeled sequences.
///
/// `Q[class]` is the empirical variance of the one-step transition residual
/// `s_{t+1} - A s_t` over consecutive ground-truth states of the same
/// identity; `R[class]` is the empirical variance of `o_t - H s_t` over
/// detections paired with their nearest ground-truth box (same class, center
/// distance under 2 m). Heading residuals are wrapped. A class with fewer
/// than two transition samples or no matched detection is an error.
pub fn estimate_noise(sequences: &[LabeledSequence]) -> Result<NoiseSuite> {
    let a = transition_matrix();
    let h = selector_matrix();

    #[derive(Default)]
    struct Acc {
        q_samples: Vec<StateVec>,
        r_samples: Vec<ObsVec>,
    }
    let mut acc: BTreeMap<ClassId, Acc> = BTreeMap::new();

    // Every class that appears anywhere must end up with enough samples.
    for seq in sequences {
        for frame in &seq.gt {
            for g in frame {
                acc.entry(g.class_id).or_default();
            }
        }
        for frame in &seq.detections {
            for d in frame {
                acc.entry(d.class_id).or_default();
            }
        }
    }

    for seq in sequences {
        // transition residuals per identity
        for t in 0..seq.gt.len().saturating_sub(1) {
            for cur in &seq.gt[t] {
                let Some(next) = seq.gt[t + 1]
                    .iter()
                    .find(|g| g.identity == cur.identity && g.class_id == cur.class_id)
                else {
                    continue;
                };
                let mut resid = next.state - a * cur.state;
                resid[ANGLE_IDX] = linalg::wrap(resid[ANGLE_IDX]);
                acc.entry(cur.class_id).or_default().q_samples.push(resid);
            }
        }
        // observation residuals, detection matched to nearest gt
        for (t, dets) in seq.detections.iter().enumerate() {
            let Some(gt_frame) = seq.gt.get(t) else {
                continue;
            };
            for det in dets {
                let c = det.obs.center2d();
                let nearest = gt_frame
                    .iter()
                    .filter(|g| g.class_id == det.class_id)
                    .map(|g| (crate::types::dist2d(c, g.center2d()), g))
                    .min_by(|x, y| x.0.total_cmp(&y.0));
                let Some((dist, g)) = nearest else { continue };
                if dist >= NOISE_MATCH_GATE_M {
                    continue;
                }
                let mut resid = det.obs.to_vector() - h * g.state;
                resid[ANGLE_IDX] = linalg::wrap(resid[ANGLE_IDX]);
                acc.entry(det.class_id).or_default().r_samples.push(resid);
            }
        }
    }

    let mut suite = NoiseSuite::default();
    for (class_id, a) in acc {
        if a.q_samples.len() < 2 {
            return Err(Error::Config(format!(
                "class {class_id}: {} transition samples, need at least 2",
                a.q_samples.len()
            )));
        }
        if a.r_samples.is_empty() {
            return Err(Error::Config(format!(
                "class {class_id}: no matched detections for observation noise"
            )));
        }
        let q_diag = variance_diag::<STATE_DIM>(&a.q_samples);
        let r_diag = variance_diag::<OBS_DIM>(&a.r_samples);
        suite.classes.insert(
            class_id,
            ClassNoise {
                q_diag: q_diag.try_into().unwrap(),
                r_diag: r_diag.try_into().unwrap(),
            },
        );
    }
    if suite.classes.is_empty() {
        return Err(Error::Config("no labeled data for any class".to_string()));
    }
    Ok(suite)
}

fn variance_diag<const N: usize>(samples: &[nalgebra::SVector<f64, N>]) -> Vec<f64> {
    let n = samples.len() as f64;
    let mean = samples.iter().fold(DVector::zeros(N), |acc, s| {
        acc + DVector::from_column_slice(s.as_slice())
    }) / n;
    let mut var = vec![0.0; N];
    for s in samples {
        for i in 0..N {
            let d = s[i] - mean[i];
            var[i] += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    var
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_noise() -> ClassNoise {
        ClassNoise {
            q_diag: [1.0; STATE_DIM],
            r_diag: [1.0; OBS_DIM],
        }
    }

    #[test]
    fn predict_constant_velocity_step() {
        let mut mean = StateVec::zeros();
        mean[7] = 1.0; // d_x
        let belief = GaussianBelief {
            mean,
            cov: StateMat::zeros(),
        };
        let model = MotionModel::constant_velocity(StateMat::zeros());
        let out = predict(&belief, &model);
        assert_eq!(out.mean[0], 1.0);
        assert_eq!(out.mean[7], 1.0);
    }

    #[test]
    fn predict_fixed_point_without_motion() {
        let mut mean = StateVec::zeros();
        mean[4] = 2.0;
        mean[5] = 2.0;
        mean[6] = 2.0;
        let belief = GaussianBelief {
            mean,
            cov: StateMat::zeros(),
        };
        let model = MotionModel::constant_velocity(StateMat::zeros());
        let out = predict(&belief, &model);
        assert_eq!(out.mean, mean);
    }

    #[test]
    fn predict_covariance_matches_explicit_product() {
        let belief = GaussianBelief {
            mean: StateVec::zeros(),
            cov: StateMat::identity(),
        };
        let model = MotionModel::constant_velocity(StateMat::identity());
        let out = predict(&belief, &model);
        let a = transition_matrix();
        let expected = a * StateMat::identity() * a.transpose() + StateMat::identity();
        for i in 0..STATE_DIM {
            for j in 0..STATE_DIM {
                assert_abs_diff_eq!(out.cov[(i, j)], expected[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn predict_observation_zero_state_uncertainty() {
        let mut mean = StateVec::zeros();
        mean[0] = 3.0;
        mean[4] = 2.0;
        mean[5] = 2.0;
        mean[6] = 2.0;
        let belief = GaussianBelief {
            mean,
            cov: StateMat::zeros(),
        };
        let model = ObservationModel::selector(ObsMat::identity());
        let (o_hat, s) = predict_observation(&belief, &model).unwrap();
        assert_eq!(o_hat.x, 3.0);
        assert_eq!(o_hat.l, 2.0);
        for i in 0..OBS_DIM {
            for j in 0..OBS_DIM {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(s[(i, j)], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn predict_observation_selector_property() {
        // With unit state covariance and (jittered) zero R, S ~ H H^T = I9.
        let mut mean = StateVec::zeros();
        mean[4] = 1.0;
        mean[5] = 1.0;
        mean[6] = 1.0;
        let belief = GaussianBelief {
            mean,
            cov: StateMat::identity(),
        };
        let model = ObservationModel::selector(ObsMat::zeros());
        let (_, s) = predict_observation(&belief, &model).unwrap();
        for i in 0..OBS_DIM {
            for j in 0..OBS_DIM {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(s[(i, j)], want, epsilon = 1e-6);
            }
        }
    }

    fn random_psd_state(rng: &mut ChaCha8Rng, scale: f64) -> StateMat {
        let m = StateMat::from_fn(|_, _| rng.random_range(-1.0..1.0) * scale);
        m * m.transpose() + StateMat::identity() * 1e-6
    }

    #[test]
    fn predict_observation_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = random_psd_state(&mut rng, 0.8);
        let mut mean = StateVec::zeros();
        mean[4] = 1.0;
        mean[5] = 1.0;
        mean[6] = 1.0;
        let belief = GaussianBelief::from_parts_symmetrized(mean, cov);
        let r = ObsMat::identity() * 0.3;
        let model = ObservationModel::selector(r);
        let (_, s) = predict_observation(&belief, &model).unwrap();
        let h = selector_matrix();
        let expected = h * belief.cov * h.transpose() + r;
        for i in 0..OBS_DIM {
            for j in 0..OBS_DIM {
                assert_abs_diff_eq!(s[(i, j)], expected[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn update_scalar_analogue() {
        // Prior N(0,1) on x, observe x = 2 with unit noise: posterior
        // mean 1, variance 0.5. All other components pinned at zero
        // uncertainty stay put.
        let mut cov = StateMat::zeros();
        cov[(0, 0)] = 1.0;
        let mut mean = StateVec::zeros();
        mean[4] = 1.0;
        mean[5] = 1.0;
        mean[6] = 1.0;
        let belief = GaussianBelief { mean, cov };
        let model = ObservationModel::selector(ObsMat::identity());
        let mut ov = belief.mean.fixed_rows::<OBS_DIM>(0).into_owned();
        ov[0] = 2.0;
        let obs = Observation::new(ov).unwrap();
        let post = update(&belief, &obs, &model).unwrap();
        assert_abs_diff_eq!(post.mean[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(post.cov[(0, 0)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(post.mean[4], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn update_zero_gain_limit() {
        let mut mean = StateVec::zeros();
        mean[0] = 5.0;
        mean[4] = 1.5;
        mean[5] = 1.5;
        mean[6] = 1.5;
        let belief = GaussianBelief {
            mean,
            cov: StateMat::identity(),
        };
        let model = ObservationModel::selector(ObsMat::identity() * 1e12);
        let mut ov = ObsVec::zeros();
        ov[0] = -100.0;
        ov[4] = 1.0;
        ov[5] = 1.0;
        ov[6] = 1.0;
        let obs = Observation::new(ov).unwrap();
        let post = update(&belief, &obs, &model).unwrap();
        for i in 0..STATE_DIM {
            assert_abs_diff_eq!(post.mean[i], belief.mean[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn update_wraps_heading_innovation() {
        let mut mean = StateVec::zeros();
        mean[ANGLE_IDX] = 3.0;
        mean[4] = 1.0;
        mean[5] = 1.0;
        mean[6] = 1.0;
        let belief = GaussianBelief {
            mean,
            cov: StateMat::identity() * 0.5,
        };
        let model = ObservationModel::selector(ObsMat::identity() * 0.5);
        let mut ov = belief.mean.fixed_rows::<OBS_DIM>(0).into_owned();
        ov[ANGLE_IDX] = -3.0; // raw residual -6.0, wrapped ~ +0.283
        let obs = Observation::new(ov).unwrap();
        let nu = innovation(&belief, &obs, &model);
        assert!(nu[ANGLE_IDX] > 0.0 && nu[ANGLE_IDX] <= std::f64::consts::PI);
        let post = update(&belief, &obs, &model).unwrap();
        // posterior heading moves toward the wrapped target, i.e. above 3.0
        assert!(post.mean[ANGLE_IDX] > 3.0 || post.mean[ANGLE_IDX] < -3.0);
    }

    #[test]
    fn posterior_trace_never_exceeds_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = unit_noise();
        let model = noise.observation_model();
        let mut belief = GaussianBelief::from_parts_symmetrized(
            StateVec::zeros(),
            random_psd_state(&mut rng, 1.0),
        );
        for _ in 0..50 {
            let mut ov = ObsVec::from_fn(|_, _| rng.random_range(-1.0..1.0));
            ov[4] = 1.0;
            ov[5] = 1.0;
            ov[6] = 1.0;
            let obs = Observation::new(ov).unwrap();
            let post = update(&belief, &obs, &model).unwrap();
            assert!(post.cov.trace() <= belief.cov.trace() + 1e-9);
            belief = predict(&belief, &noise.motion_model());
        }
    }

    #[test]
    fn predict_mean_is_linear() {
        let m1 = StateVec::from_fn(|i, _| 0.1 * i as f64);
        let m2 = StateVec::from_fn(|i, _| -0.05 * i as f64 + 0.2);
        let (alpha, beta) = (0.3, 0.7);
        let model = MotionModel::constant_velocity(StateMat::zeros());
        let mk = |m: StateVec| GaussianBelief {
            mean: m,
            cov: StateMat::zeros(),
        };
        let lhs = predict(&mk(alpha * m1 + beta * m2), &model).mean;
        let rhs = alpha * predict(&mk(m1), &model).mean + beta * predict(&mk(m2), &model).mean;
        for i in 0..STATE_DIM {
            assert_abs_diff_eq!(lhs[i], rhs[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn noise_estimation_zero_residual_cases() {
        // Noiseless constant-velocity ground truth, detections equal to gt.
        let mut gt_frames = Vec::new();
        let mut det_frames = Vec::new();
        for t in 0..20usize {
            let mut s = StateVec::zeros();
            s[0] = t as f64 * 1.5;
            s[1] = 3.0;
            s[4] = 4.0;
            s[5] = 2.0;
            s[6] = 1.5;
            s[7] = 1.5;
            let g = GtBox {
                identity: 1,
                class_id: 0,
                state: s,
            };
            let obs = Observation::new(s.fixed_rows::<OBS_DIM>(0).into_owned()).unwrap();
            gt_frames.push(vec![g]);
            det_frames.push(vec![Detection {
                obs,
                class_id: 0,
                confidence: 1.0,
                feat2d: vec![],
                feat3d: vec![],
                frame: t,
            }]);
        }
        let suite = estimate_noise(&[LabeledSequence {
            gt: gt_frames,
            detections: det_frames,
        }])
        .unwrap();
        let cn = suite.get(0).unwrap();
        for v in cn.q_diag {
            assert!(v <= 1e-12, "q component {v}");
        }
        for v in cn.r_diag {
            assert!(v <= 1e-12, "r component {v}");
        }
    }

    #[test]
    fn noise_estimation_errors_on_thin_class() {
        let s = StateVec::from_fn(|i, _| if (4..7).contains(&i) { 1.0 } else { 0.0 });
        let seq = LabeledSequence {
            gt: vec![vec![GtBox {
                identity: 1,
                class_id: 7,
                state: s,
            }]],
            detections: vec![vec![]],
        };
        let err = estimate_noise(&[seq]).unwrap_err();
        assert!(err.to_string().contains("class 7"), "{err}");
    }
}
