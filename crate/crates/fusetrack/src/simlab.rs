//! Synthetic scenario generator: ground-truth trajectories with persistent
//! identities, noisy detections with misses and Poisson clutter, and
//! identity-correlated features.
//!
//! The scene is a 100 m x 100 m ground plane. Each identity carries a fixed
//! latent appearance vector; true detections observe `latent + noise` while
//! clutter draws fresh feature vectors. True latents additionally share a
//! constant offset along a fixed direction (`appearance_offset`), which is
//! what makes real detections distinguishable from clutter for the learned
//! initialization gate. The 6-slot one-hot block at the end of the 2D
//! feature encodes the bearing sector of the detection relative to the scene
//! center and is carried as data only.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::filter::LabeledSequence;
use crate::linalg;
use crate::types::{
    ClassId, Detection, FeatureDims, GtBox, Observation, ObsVec, StateVec, OBS_DIM, STATE_DIM,
};
use crate::{Error, Result};

pub const SCENE_MIN: f64 = 0.0;
pub const SCENE_MAX: f64 = 100.0;
const SCENE_CENTER: (f64, f64) = (50.0, 50.0);
pub const ONE_HOT_SLOTS: usize = 6;

/// Fractions of objects following each motion pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionMix {
    pub constant_velocity: f64,
    pub constant_turn_rate: f64,
    pub stationary: f64,
}

impl Default for MotionMix {
    fn default() -> Self {
        MotionMix {
            constant_velocity: 0.6,
            constant_turn_rate: 0.2,
            stationary: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Objects to simulate per class.
    pub n_objects: BTreeMap<ClassId, usize>,
    pub motion_mix: MotionMix,
    pub frames: usize,
    /// Seconds between frames (2 Hz keyframes by default).
    pub frame_interval: f64,
    /// Detection noise std per observation component.
    pub obs_noise_std: [f64; OBS_DIM],
    /// Per-frame probability that a ground-truth box goes undetected.
    pub miss_prob: f64,
    /// Expected clutter detections per frame (Poisson rate).
    pub clutter_rate: f64,
    pub dims: FeatureDims,
    pub feature_noise_std: f64,
    /// Offset separating true-detection latents from clutter features.
    pub appearance_offset: f64,
    /// Injected process noise std per state component; applied to
    /// constant-velocity objects, which are generated through the linear
    /// motion recursion. Turning and stationary objects follow exact paths.
    pub process_noise_std: [f64; STATE_DIM],
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let mut n_objects = BTreeMap::new();
        n_objects.insert(0, 4);
        n_objects.insert(1, 2);
        ScenarioConfig {
            n_objects,
            motion_mix: MotionMix::default(),
            frames: 40,
            frame_interval: 0.5,
            obs_noise_std: [0.5, 0.5, 0.2, 0.2, 0.15, 0.1, 0.1, 0.3, 0.3],
            miss_prob: 0.05,
            clutter_rate: 0.5,
            dims: FeatureDims {
                feat2d: 16,
                feat3d_channels: 8,
            },
            feature_noise_std: 0.25,
            appearance_offset: 3.0,
            process_noise_std: [0.0; STATE_DIM],
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config("scenario needs at least 2 frames".into()));
        }
        if !(0.0..=1.0).contains(&self.miss_prob) {
            return Err(Error::Config(format!(
                "miss probability {} outside [0,1]",
                self.miss_prob
            )));
        }
        if self.clutter_rate < 0.0 {
            return Err(Error::Config("clutter rate must be >= 0".into()));
        }
        let m = &self.motion_mix;
        for (name, f) in [
            ("constant_velocity", m.constant_velocity),
            ("constant_turn_rate", m.constant_turn_rate),
            ("stationary", m.stationary),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("motion fraction {name} = {f}")));
            }
        }
        if self.dims.feat2d < ONE_HOT_SLOTS + 1 {
            return Err(Error::Config(format!(
                "feat2d dim {} too small for the {ONE_HOT_SLOTS}-slot one-hot",
                self.dims.feat2d
            )));
        }
        if self.frame_interval <= 0.0 {
            return Err(Error::Config("frame interval must be positive".into()));
        }
        Ok(())
    }

    fn latent_len(&self) -> usize {
        self.dims.feat2d - ONE_HOT_SLOTS + self.dims.feat3d_len()
    }
}

/// A detection plus its provenance (ground-truth identity, or `None` for
/// clutter). The provenance never leaves the simulator's in-memory form.
#[derive(Debug, Clone)]
pub struct SimDetection {
    pub det: Detection,
    pub source: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct ScenarioFrame {
    pub gt: Vec<GtBox>,
    pub detections: Vec<SimDetection>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub dims: FeatureDims,
    pub frame_interval: f64,
    pub frames: Vec<ScenarioFrame>,
    /// Identity -> latent appearance vector.
    pub latents: BTreeMap<u64, Vec<f64>>,
}

impl Scenario {
    pub fn detections_per_frame(&self) -> Vec<Vec<Detection>> {
        self.frames
            .iter()
            .map(|f| f.detections.iter().map(|d| d.det.clone()).collect())
            .collect()
    }

    pub fn gt_per_frame(&self) -> Vec<Vec<GtBox>> {
        self.frames.iter().map(|f| f.gt.clone()).collect()
    }

    pub fn to_labeled_sequence(&self) -> LabeledSequence {
        LabeledSequence {
            gt: self.gt_per_frame(),
            detections: self.detections_per_frame(),
        }
    }

    pub fn identities(&self) -> Vec<u64> {
        self.latents.keys().copied().collect()
    }
}

#[derive(Clone, Copy)]
enum MotionKind {
    ConstantVelocity,
    ConstantTurn,
    Stationary,
}

struct ObjectSpec {
    identity: u64,
    class_id: ClassId,
    kind: MotionKind,
    start: (f64, f64),
    z: f64,
    size: (f64, f64, f64),
    speed: f64,
    heading: f64,
    turn_rate: f64, // rad/s, signed
}

/// Generate a scenario. Fully deterministic given the config (including its
/// seed).
pub fn generate(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut specs = Vec::new();
    let mut next_identity = 1u64;
    for (&class_id, &count) in &config.n_objects {
        for _ in 0..count {
            let kind = draw_kind(&config.motion_mix, &mut rng);
            specs.push(make_object_spec(
                next_identity,
                class_id,
                kind,
                &mut rng,
            ));
            next_identity += 1;
        }
    }

    let trajectories: Vec<Vec<StateVec>> = specs
        .iter()
        .map(|s| simulate_trajectory(s, config, &mut rng))
        .collect();

    build_scenario(config, &specs, &trajectories, &mut rng)
}

/// Two objects whose paths meet at a vertex and deflect onto each other's
/// constant-velocity continuations, plus two turning objects elsewhere. The
/// closest ground-truth approach is below the position-noise scale, so
/// identities are recoverable only through appearance features.
pub fn crossing_benchmark(seed: u64) -> Scenario {
    let mut config = ScenarioConfig::default();
    config.n_objects.clear();
    config.seed = seed;
    config.frames = 40;
    config.obs_noise_std = [0.7, 0.7, 0.2, 0.25, 0.15, 0.1, 0.1, 0.45, 0.45];
    config.miss_prob = 0.02;
    config.clutter_rate = 0.0;
    config.appearance_offset = 3.0;
    config.feature_noise_std = 0.25;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);

    let vertex = (
        rng.random_range(45.0..55.0),
        rng.random_range(45.0..55.0),
    );
    let half_angle = rng.random_range(0.18..0.32);
    let step = rng.random_range(2.6..3.4); // meters per frame
    let cross_frame = config.frames / 2;
    let sep = rng.random_range(0.2..0.5);

    let mut specs = Vec::new();
    let mut trajectories = Vec::new();

    // The two deflecting objects.
    for (identity, sign) in [(1u64, 1.0f64), (2u64, -1.0f64)] {
        let d_in = (half_angle.cos(), sign * half_angle.sin());
        let d_out = (half_angle.cos(), -sign * half_angle.sin());
        let offset = if identity == 2 { sep } else { 0.0 };
        let mut traj = Vec::with_capacity(config.frames);
        let positions: Vec<(f64, f64)> = (0..config.frames)
            .map(|t| {
                let dt = t as f64 - cross_frame as f64;
                let d = if t <= cross_frame { d_in } else { d_out };
                (vertex.0 + dt * step * d.0, vertex.1 + dt * step * d.1 + offset)
            })
            .collect();
        let size = (
            rng.random_range(4.0..4.8),
            rng.random_range(1.7..2.1),
            rng.random_range(1.4..1.7),
        );
        let z = rng.random_range(0.4..0.8);
        fill_states_from_positions(&positions, z, size, &mut traj);
        specs.push(ObjectSpec {
            identity,
            class_id: 0,
            kind: MotionKind::ConstantVelocity,
            start: positions[0],
            z,
            size,
            speed: step / config.frame_interval,
            heading: 0.0,
            turn_rate: 0.0,
        });
        trajectories.push(traj);
    }

    // Two turning objects away from the crossing.
    for (identity, center) in [(3u64, (25.0, 75.0)), (4u64, (75.0, 25.0))] {
        let spec = ObjectSpec {
            identity,
            class_id: 0,
            kind: MotionKind::ConstantTurn,
            start: center,
            z: rng.random_range(0.4..0.8),
            size: (
                rng.random_range(4.0..4.8),
                rng.random_range(1.7..2.1),
                rng.random_range(1.4..1.7),
            ),
            speed: rng.random_range(4.0..7.0),
            heading: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            turn_rate: rng.random_range(0.25..0.5) * if identity == 3 { 1.0 } else { -1.0 },
        };
        trajectories.push(simulate_trajectory(&spec, &config, &mut rng));
        specs.push(spec);
    }

    build_scenario(&config, &specs, &trajectories, &mut rng)
        .expect("crossing benchmark config is valid")
}

fn draw_kind(mix: &MotionMix, rng: &mut ChaCha8Rng) -> MotionKind {
    let total = mix.constant_velocity + mix.constant_turn_rate + mix.stationary;
    if total <= 0.0 {
        return MotionKind::ConstantVelocity;
    }
    let u = rng.random_range(0.0..total);
    if u < mix.constant_velocity {
        MotionKind::ConstantVelocity
    } else if u < mix.constant_velocity + mix.constant_turn_rate {
        MotionKind::ConstantTurn
    } else {
        MotionKind::Stationary
    }
}

fn make_object_spec(
    identity: u64,
    class_id: ClassId,
    kind: MotionKind,
    rng: &mut ChaCha8Rng,
) -> ObjectSpec {
    // class 0 is vehicle-like, other classes pedestrian-like
    let (size, speed) = if class_id == 0 {
        (
            (
                rng.random_range(3.8..5.0),
                rng.random_range(1.6..2.2),
                rng.random_range(1.3..1.9),
            ),
            rng.random_range(2.0..15.0),
        )
    } else {
        (
            (
                rng.random_range(0.5..1.0),
                rng.random_range(0.4..0.8),
                rng.random_range(1.5..1.9),
            ),
            rng.random_range(0.5..2.0),
        )
    };
    ObjectSpec {
        identity,
        class_id,
        kind,
        start: (
            rng.random_range(15.0..85.0),
            rng.random_range(15.0..85.0),
        ),
        z: rng.random_range(0.2..1.0),
        size,
        speed,
        heading: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        turn_rate: rng.random_range(0.1..0.5) * if rng.random::<bool>() { 1.0 } else { -1.0 },
    }
}

/// Heading of the motion between consecutive positions; stationary segments
/// keep the previous heading.
fn fill_states_from_positions(
    positions: &[(f64, f64)],
    z: f64,
    size: (f64, f64, f64),
    out: &mut Vec<StateVec>,
) {
    let n = positions.len();
    let mut headings = vec![0.0f64; n];
    for t in 0..n {
        let (from, to) = if t + 1 < n {
            (positions[t], positions[t + 1])
        } else {
            (positions[t - 1], positions[t])
        };
        let (dx, dy) = (to.0 - from.0, to.1 - from.1);
        headings[t] = if dx.abs() + dy.abs() < 1e-12 {
            if t > 0 {
                headings[t - 1]
            } else {
                0.0
            }
        } else {
            dy.atan2(dx)
        };
    }
    for t in 0..n {
        let prev = if t > 0 { t - 1 } else { 0 };
        let next = if t > 0 { t } else { 1.min(n - 1) };
        let d = (
            positions[next].0 - positions[prev].0,
            positions[next].1 - positions[prev].1,
        );
        let d_a = if t > 0 {
            linalg::wrap(headings[t] - headings[t - 1])
        } else if n > 1 {
            linalg::wrap(headings[1] - headings[0])
        } else {
            0.0
        };
        let mut s = StateVec::zeros();
        s[0] = positions[t].0;
        s[1] = positions[t].1;
        s[2] = z;
        s[3] = headings[t];
        s[4] = size.0;
        s[5] = size.1;
        s[6] = size.2;
        s[7] = d.0;
        s[8] = d.1;
        s[9] = 0.0;
        s[10] = d_a;
        out.push(s);
    }
}

fn simulate_trajectory(
    spec: &ObjectSpec,
    config: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<StateVec> {
    let dt = config.frame_interval;
    let n = config.frames;
    match spec.kind {
        MotionKind::ConstantVelocity => {
            // Linear motion recursion with optional injected process noise.
            let a = crate::filter::transition_matrix();
            let noise: Vec<Normal<f64>> = config
                .process_noise_std
                .iter()
                .map(|&s| Normal::new(0.0, s.max(0.0)).unwrap())
                .collect();
            let inject = config.process_noise_std.iter().any(|&s| s > 0.0);
            let mut s = StateVec::zeros();
            s[0] = spec.start.0;
            s[1] = spec.start.1;
            s[2] = spec.z;
            s[3] = spec.heading;
            s[4] = spec.size.0;
            s[5] = spec.size.1;
            s[6] = spec.size.2;
            s[7] = spec.speed * dt * spec.heading.cos();
            s[8] = spec.speed * dt * spec.heading.sin();
            let mut traj = Vec::with_capacity(n);
            for _ in 0..n {
                traj.push(s);
                s = a * s;
                if inject {
                    for (i, dist) in noise.iter().enumerate() {
                        if config.process_noise_std[i] > 0.0 {
                            s[i] += dist.sample(rng);
                        }
                    }
                }
                s[3] = linalg::wrap(s[3]);
                for i in 4..7 {
                    s[i] = s[i].max(0.05);
                }
            }
            traj
        }
        MotionKind::ConstantTurn => {
            let omega = spec.turn_rate;
            let radius = spec.speed / omega.abs().max(1e-6);
            let side = omega.signum();
            // turn center sits perpendicular to the initial heading
            let cx = spec.start.0 - side * radius * spec.heading.sin();
            let cy = spec.start.1 + side * radius * spec.heading.cos();
            let phi0 = (spec.start.1 - cy).atan2(spec.start.0 - cx);
            let positions: Vec<(f64, f64)> = (0..n)
                .map(|t| {
                    let phi = phi0 + omega * dt * t as f64;
                    (cx + radius * phi.cos(), cy + radius * phi.sin())
                })
                .collect();
            let mut traj = Vec::with_capacity(n);
            fill_states_from_positions(&positions, spec.z, spec.size, &mut traj);
            traj
        }
        MotionKind::Stationary => {
            let mut s = StateVec::zeros();
            s[0] = spec.start.0;
            s[1] = spec.start.1;
            s[2] = spec.z;
            s[3] = spec.heading;
            s[4] = spec.size.0;
            s[5] = spec.size.1;
            s[6] = spec.size.2;
            vec![s; n]
        }
    }
}

fn bearing_one_hot(x: f64, y: f64) -> [f64; ONE_HOT_SLOTS] {
    let bearing = (y - SCENE_CENTER.1).atan2(x - SCENE_CENTER.0);
    let sector = ((bearing + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)
        * ONE_HOT_SLOTS as f64)
        .floor() as usize;
    let mut slots = [0.0; ONE_HOT_SLOTS];
    slots[sector.min(ONE_HOT_SLOTS - 1)] = 1.0;
    slots
}

/// Split one latent vector into the 2D-feature block (with the one-hot
/// appended) and the 3D-feature block.
fn features_from_latent(
    latent: &[f64],
    noise_std: f64,
    pos: (f64, f64),
    dims: &FeatureDims,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let normal = Normal::new(0.0, noise_std.max(0.0)).unwrap();
    let latent2d = dims.feat2d - ONE_HOT_SLOTS;
    let mut feat2d = Vec::with_capacity(dims.feat2d);
    for &v in &latent[..latent2d] {
        feat2d.push(v + if noise_std > 0.0 { normal.sample(rng) } else { 0.0 });
    }
    feat2d.extend_from_slice(&bearing_one_hot(pos.0, pos.1));
    let mut feat3d = Vec::with_capacity(dims.feat3d_len());
    for &v in &latent[latent2d..] {
        feat3d.push(v + if noise_std > 0.0 { normal.sample(rng) } else { 0.0 });
    }
    (feat2d, feat3d)
}

fn build_scenario(
    config: &ScenarioConfig,
    specs: &[ObjectSpec],
    trajectories: &[Vec<StateVec>],
    rng: &mut ChaCha8Rng,
) -> Result<Scenario> {
    let latent_len = config.latent_len();
    let offset_dir = 1.0 / (latent_len as f64).sqrt();
    let latent_normal = Normal::new(0.0, 1.0).unwrap();

    let mut latents: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for spec in specs {
        let latent: Vec<f64> = (0..latent_len)
            .map(|_| latent_normal.sample(rng) + config.appearance_offset * offset_dir)
            .collect();
        latents.insert(spec.identity, latent);
    }

    let obs_noise: Vec<Normal<f64>> = config
        .obs_noise_std
        .iter()
        .map(|&s| Normal::new(0.0, s.max(0.0)).unwrap())
        .collect();
    let true_conf = Normal::new(0.85, 0.08).unwrap();
    let clutter_conf = Normal::new(0.4, 0.15).unwrap();
    let clutter_poisson = if config.clutter_rate > 0.0 {
        Some(Poisson::new(config.clutter_rate).map_err(|e| {
            Error::Config(format!("invalid clutter rate {}: {e}", config.clutter_rate))
        })?)
    } else {
        None
    };

    let classes: Vec<ClassId> = if config.n_objects.is_empty() {
        vec![0]
    } else {
        config.n_objects.keys().copied().collect()
    };

    let mut frames = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        let mut frame = ScenarioFrame::default();
        for (spec, traj) in specs.iter().zip(trajectories) {
            frame.gt.push(GtBox {
                identity: spec.identity,
                class_id: spec.class_id,
                state: traj[t],
            });
        }

        // true detections
        for (spec, traj) in specs.iter().zip(trajectories) {
            if config.miss_prob > 0.0 && rng.random_range(0.0..1.0) < config.miss_prob {
                continue;
            }
            let s = traj[t];
            let mut o = ObsVec::zeros();
            for i in 0..OBS_DIM {
                o[i] = s[i];
                if config.obs_noise_std[i] > 0.0 {
                    o[i] += obs_noise[i].sample(rng);
                }
            }
            o[3] = linalg::wrap(o[3]);
            for i in 4..7 {
                o[i] = o[i].max(0.05);
            }
            let obs = Observation::new(o).expect("simulated observation is valid");
            let (feat2d, feat3d) = features_from_latent(
                &latents[&spec.identity],
                config.feature_noise_std,
                (o[0], o[1]),
                &config.dims,
                rng,
            );
            frame.detections.push(SimDetection {
                det: Detection {
                    obs,
                    class_id: spec.class_id,
                    confidence: true_conf.sample(rng).clamp(0.05, 0.999),
                    feat2d,
                    feat3d,
                    frame: t,
                },
                source: Some(spec.identity),
            });
        }

        // clutter
        if let Some(poisson) = &clutter_poisson {
            let count = poisson.sample(rng) as usize;
            for _ in 0..count {
                let x = rng.random_range(SCENE_MIN..SCENE_MAX);
                let y = rng.random_range(SCENE_MIN..SCENE_MAX);
                let mut o = ObsVec::zeros();
                o[0] = x;
                o[1] = y;
                o[2] = rng.random_range(0.0..2.0);
                o[3] = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                o[4] = rng.random_range(0.5..5.0);
                o[5] = rng.random_range(0.4..2.2);
                o[6] = rng.random_range(0.5..2.0);
                o[7] = rng.random_range(-1.0..1.0);
                o[8] = rng.random_range(-1.0..1.0);
                let obs = Observation::new(o).expect("clutter observation is valid");
                let latent2d = config.dims.feat2d - ONE_HOT_SLOTS;
                let mut feat2d: Vec<f64> =
                    (0..latent2d).map(|_| latent_normal.sample(rng)).collect();
                feat2d.extend_from_slice(&bearing_one_hot(x, y));
                let feat3d: Vec<f64> = (0..config.dims.feat3d_len())
                    .map(|_| latent_normal.sample(rng))
                    .collect();
                frame.detections.push(SimDetection {
                    det: Detection {
                        obs,
                        class_id: classes[rng.random_range(0..classes.len())],
                        confidence: clutter_conf.sample(rng).clamp(0.05, 0.999),
                        feat2d,
                        feat3d,
                        frame: t,
                    },
                    source: None,
                });
            }
        }

        frames.push(frame);
    }

    Ok(Scenario {
        dims: config.dims,
        frame_interval: config.frame_interval,
        frames,
        latents,
    })
}
