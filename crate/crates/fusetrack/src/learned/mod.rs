//! The four trainable modules, their losses, and the supervision labeling
//! rules.
//!
//! - `FusionNet` (G1) fuses the 2D appearance vector into the 3D feature
//!   grid through a residual MLP.
//! - `FeatDistNet` (G2) maps a channel-concatenated pair of fused features
//!   to a dissimilarity in (0,1).
//! - `CoefNet` (G3) shares G2's trunk but emits the two unconstrained
//!   combination coefficients (alpha, beta) per pair. Its final layer is
//!   zero-initialized so alpha = beta = 0 at the start of training and the
//!   combined distance begins as the plain Mahalanobis distance.
//! - `InitNet` (G4) scores single fused features for track initialization.
//!
//! Training runs in two stages (G1+G2 on the pair classification loss, then
//! G3 on the margin losses with G1 and G2 frozen) plus an independent stage
//! for G4; see [`train`].

pub mod train;

pub use train::{collect_training_set, train_all, PairBatch, RawFeature, TrainOptions, TrainingSet};

use nalgebra::DMatrix;
use rand::Rng;

use crate::io::LossConstants;
use crate::nn::{LayerSpec, Network, ParamStore, Tape, Tensor};
use crate::types::{Detection, FeatureDims, GtBox};
use crate::{Error, Result};

/// Center-distance gate shared by the pair labeling rule and the
/// track-initialization targets.
pub const PAIR_GATE_M: f64 = 2.0;

/// Feature distances are clamped into the open interval so the binary
/// cross-entropy stays finite even when the sigmoid saturates.
pub const FEAT_DIST_EPS: f64 = 1e-9;

/// Hidden-layer sizes of the trainable modules. Defaults are the full-scale
/// sizes; desk-scale runs shrink them through the run config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub g1_hidden: usize,
    pub conv_channels: usize,
    pub mlp_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            g1_hidden: 1536,
            conv_channels: 256,
            mlp_hidden: 128,
        }
    }
}

/// G1: `fused = reshape(MLP(feat2d)) + feat3d`.
#[derive(Debug, Clone)]
pub struct FusionNet {
    pub net: Network,
    pub params: ParamStore,
    dims: FeatureDims,
}

/// G2: pair trunk ending in a sigmoid scalar.
#[derive(Debug, Clone)]
pub struct FeatDistNet {
    pub net: Network,
    pub params: ParamStore,
    dims: FeatureDims,
}

/// G3: pair trunk ending in two unconstrained scalars (alpha, beta).
#[derive(Debug, Clone)]
pub struct CoefNet {
    pub net: Network,
    pub params: ParamStore,
    dims: FeatureDims,
}

/// G4: single-feature trunk ending in a sigmoid scalar.
#[derive(Debug, Clone)]
pub struct InitNet {
    pub net: Network,
    pub params: ParamStore,
    dims: FeatureDims,
}

fn g1_layers(dims: &FeatureDims, arch: &ArchConfig) -> Vec<LayerSpec> {
    let out = dims.feat3d_len();
    vec![
        LayerSpec::dense("fuse1", dims.feat2d, arch.g1_hidden),
        LayerSpec::Relu,
        LayerSpec::dense("fuse2", arch.g1_hidden, out),
        LayerSpec::Reshape {
            shape: vec![dims.feat3d_channels, 3, 3],
        },
    ]
}

fn pair_trunk(
    in_channels: usize,
    arch: &ArchConfig,
    outputs: usize,
    sigmoid: bool,
) -> Vec<LayerSpec> {
    let mut layers = vec![
        LayerSpec::conv3x3("conv", in_channels, arch.conv_channels),
        LayerSpec::Relu,
        LayerSpec::dense("mlp1", arch.conv_channels, arch.mlp_hidden),
        LayerSpec::Relu,
        LayerSpec::dense("mlp2", arch.mlp_hidden, outputs),
    ];
    if sigmoid {
        layers.push(LayerSpec::Sigmoid);
    }
    layers
}

impl FusionNet {
    pub fn init<R: Rng>(dims: FeatureDims, arch: &ArchConfig, rng: &mut R) -> Self {
        let net = Network::new(g1_layers(&dims, arch));
        let params = net.init_params(rng);
        FusionNet { net, params, dims }
    }

    pub fn dims(&self) -> &FeatureDims {
        &self.dims
    }
}

impl FeatDistNet {
    pub fn init<R: Rng>(dims: FeatureDims, arch: &ArchConfig, rng: &mut R) -> Self {
        let net = Network::new(pair_trunk(2 * dims.feat3d_channels, arch, 1, true));
        let params = net.init_params(rng);
        FeatDistNet { net, params, dims }
    }
}

impl CoefNet {
    pub fn init<R: Rng>(dims: FeatureDims, arch: &ArchConfig, rng: &mut R) -> Self {
        let net = Network::new(pair_trunk(2 * dims.feat3d_channels, arch, 2, false));
        let mut params = net.init_params(rng);
        // zero the output layer: alpha and beta start at exactly 0, so the
        // epoch-0 tracker is the Mahalanobis baseline
        for name in ["mlp2.w", "mlp2.b"] {
            let p = params.get_mut(name).expect("coef net has an mlp2 layer");
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        CoefNet { net, params, dims }
    }
}

impl InitNet {
    pub fn init<R: Rng>(dims: FeatureDims, arch: &ArchConfig, rng: &mut R) -> Self {
        let net = Network::new(pair_trunk(dims.feat3d_channels, arch, 1, true));
        let params = net.init_params(rng);
        InitNet { net, params, dims }
    }
}

/// The four nets bundled for inference.
#[derive(Debug, Clone)]
pub struct LearnedNets {
    pub dims: FeatureDims,
    pub g1: FusionNet,
    pub g2: FeatDistNet,
    pub g3: CoefNet,
    pub g4: InitNet,
}

impl LearnedNets {
    pub fn init<R: Rng>(dims: FeatureDims, arch: &ArchConfig, rng: &mut R) -> Self {
        LearnedNets {
            dims,
            g1: FusionNet::init(dims, arch, rng),
            g2: FeatDistNet::init(dims, arch, rng),
            g3: CoefNet::init(dims, arch, rng),
            g4: InitNet::init(dims, arch, rng),
        }
    }

    /// Write the four checkpoints (`g1.ckpt` .. `g4.ckpt`) into a directory.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        crate::io::write_checkpoint(&dir.join("g1.ckpt"), "g1", &self.dims, &self.g1.params)?;
        crate::io::write_checkpoint(&dir.join("g2.ckpt"), "g2", &self.dims, &self.g2.params)?;
        crate::io::write_checkpoint(&dir.join("g3.ckpt"), "g3", &self.dims, &self.g3.params)?;
        crate::io::write_checkpoint(&dir.join("g4.ckpt"), "g4", &self.dims, &self.g4.params)?;
        Ok(())
    }

    /// Load the four checkpoints from a directory, rebuilding the layer
    /// structure from the stored tensor shapes and validating them against
    /// the expected feature dims.
    pub fn load(dir: &std::path::Path, expected_dims: &FeatureDims) -> Result<Self> {
        let mut stores = Vec::new();
        for name in ["g1", "g2", "g3", "g4"] {
            let path = dir.join(format!("{name}.ckpt"));
            let (net_name, dims, params) = crate::io::read_checkpoint(&path)?;
            if net_name != name {
                return Err(Error::Config(format!(
                    "{}: checkpoint is for net `{net_name}`, expected `{name}`",
                    path.display()
                )));
            }
            if dims != *expected_dims {
                return Err(Error::Config(format!(
                    "{}: checkpoint built for feat2d={} channels={}, run configured for feat2d={} channels={}",
                    path.display(),
                    dims.feat2d,
                    dims.feat3d_channels,
                    expected_dims.feat2d,
                    expected_dims.feat3d_channels,
                )));
            }
            stores.push(params);
        }
        let g4_params = stores.pop().unwrap();
        let g3_params = stores.pop().unwrap();
        let g2_params = stores.pop().unwrap();
        let g1_params = stores.pop().unwrap();

        let arch = infer_arch(&g1_params, &g2_params)?;
        let dims = *expected_dims;
        let make = |layers: Vec<LayerSpec>, params: ParamStore| -> Result<(Network, ParamStore)> {
            let net = Network::new(layers);
            validate_params(&net, &params)?;
            Ok((net, params))
        };
        let (g1n, g1p) = make(g1_layers(&dims, &arch), g1_params)?;
        let (g2n, g2p) = make(pair_trunk(2 * dims.feat3d_channels, &arch, 1, true), g2_params)?;
        let (g3n, g3p) = make(pair_trunk(2 * dims.feat3d_channels, &arch, 2, false), g3_params)?;
        let (g4n, g4p) = make(pair_trunk(dims.feat3d_channels, &arch, 1, true), g4_params)?;
        Ok(LearnedNets {
            dims,
            g1: FusionNet {
                net: g1n,
                params: g1p,
                dims,
            },
            g2: FeatDistNet {
                net: g2n,
                params: g2p,
                dims,
            },
            g3: CoefNet {
                net: g3n,
                params: g3p,
                dims,
            },
            g4: InitNet {
                net: g4n,
                params: g4p,
                dims,
            },
        })
    }
}

fn infer_arch(g1: &ParamStore, g2: &ParamStore) -> Result<ArchConfig> {
    let g1_hidden = g1.get("fuse1.b")?.value.numel();
    let conv_channels = g2.get("conv.b")?.value.numel();
    let mlp_hidden = g2.get("mlp1.b")?.value.numel();
    Ok(ArchConfig {
        g1_hidden,
        conv_channels,
        mlp_hidden,
    })
}

fn validate_params(net: &Network, params: &ParamStore) -> Result<()> {
    for layer in &net.layers {
        let (name, wshape, bshape): (&str, Vec<usize>, Vec<usize>) = match layer {
            LayerSpec::Dense {
                name,
                input,
                output,
            } => (name, vec![*output, *input], vec![*output]),
            LayerSpec::Conv3x3Valid {
                name,
                in_channels,
                out_channels,
            } => (name, vec![*out_channels, *in_channels, 3, 3], vec![*out_channels]),
            _ => continue,
        };
        let w = params.get(&format!("{name}.w"))?;
        if w.value.shape() != wshape.as_slice() {
            return Err(Error::Config(format!(
                "checkpoint tensor {name}.w has shape {:?}, expected {:?}",
                w.value.shape(),
                wshape
            )));
        }
        let b = params.get(&format!("{name}.b"))?;
        if b.value.shape() != bshape.as_slice() {
            return Err(Error::Config(format!(
                "checkpoint tensor {name}.b has shape {:?}, expected {:?}",
                b.value.shape(),
                bshape
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

fn feat2d_tensor(dims: &FeatureDims, feat2d: &[f64]) -> Result<Tensor> {
    if feat2d.len() != dims.feat2d {
        return Err(Error::Config(format!(
            "feat2d has {} values, configured dim is {}",
            feat2d.len(),
            dims.feat2d
        )));
    }
    Tensor::from_vec(&[dims.feat2d], feat2d.to_vec())
}

fn feat3d_tensor(dims: &FeatureDims, feat3d: &[f64]) -> Result<Tensor> {
    if feat3d.len() != dims.feat3d_len() {
        return Err(Error::Config(format!(
            "feat3d has {} values, configured dim is {}",
            feat3d.len(),
            dims.feat3d_len()
        )));
    }
    Tensor::from_vec(&[dims.feat3d_channels, 3, 3], feat3d.to_vec())
}

/// Residual fusion `G1(feat2d) + feat3d` for one feature pair.
pub fn fuse_one(g1: &FusionNet, feat2d: &[f64], feat3d: &[f64]) -> Result<Tensor> {
    let x2 = feat2d_tensor(&g1.dims, feat2d)?;
    let f3 = feat3d_tensor(&g1.dims, feat3d)?;
    let mut out = g1.net.infer(&g1.params, &x2)?;
    for (o, r) in out.data_mut().iter_mut().zip(f3.data()) {
        *o += r;
    }
    Ok(out)
}

/// Fuse a batch of 2D/3D feature pairs.
pub fn fuse(
    g1: &FusionNet,
    feat2d_batch: &[&[f64]],
    feat3d_batch: &[&[f64]],
) -> Result<Vec<Tensor>> {
    if feat2d_batch.len() != feat3d_batch.len() {
        return Err(Error::Config(format!(
            "fuse: {} 2D features vs {} 3D features",
            feat2d_batch.len(),
            feat3d_batch.len()
        )));
    }
    feat2d_batch
        .iter()
        .zip(feat3d_batch)
        .map(|(f2, f3)| fuse_one(g1, f2, f3))
        .collect()
}

/// Fuse the features carried by detections.
pub fn fuse_detections(g1: &FusionNet, dets: &[Detection]) -> Result<Vec<Tensor>> {
    dets.iter()
        .map(|d| fuse_one(g1, &d.feat2d, &d.feat3d))
        .collect()
}

/// Training-path fusion: also returns the G1 tape so gradients can flow
/// back through the MLP (the residual path passes gradients through
/// unchanged).
pub fn fuse_one_recorded(
    g1: &FusionNet,
    feat2d: &[f64],
    feat3d: &[f64],
) -> Result<(Tensor, Tape)> {
    let x2 = feat2d_tensor(&g1.dims, feat2d)?;
    let f3 = feat3d_tensor(&g1.dims, feat3d)?;
    let (mut out, tape) = g1.net.forward(&g1.params, &x2)?;
    for (o, r) in out.data_mut().iter_mut().zip(f3.data()) {
        *o += r;
    }
    Ok((out, tape))
}

/// Channel concatenation of a (detection, track) fused-feature pair,
/// detection first.
pub fn pair_input(det: &Tensor, trk: &Tensor) -> Result<Tensor> {
    Tensor::concat_channels(det, trk)
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(FEAT_DIST_EPS, 1.0 - FEAT_DIST_EPS)
}

/// Full N x M grid of learned feature distances, entries in (0,1).
pub fn feature_distance(
    fused_det: &[Tensor],
    fused_trk: &[Tensor],
    g2: &FeatDistNet,
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(fused_det.len(), fused_trk.len());
    for (n, d) in fused_det.iter().enumerate() {
        for (m, t) in fused_trk.iter().enumerate() {
            let input = pair_input(d, t)?;
            let y = g2.net.infer(&g2.params, &input)?;
            out[(n, m)] = clamp_unit(y.data()[0]);
        }
    }
    Ok(out)
}

/// Full N x M grids of the combination coefficients.
pub fn coef_forward(
    fused_det: &[Tensor],
    fused_trk: &[Tensor],
    g3: &CoefNet,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut alpha = DMatrix::zeros(fused_det.len(), fused_trk.len());
    let mut beta = DMatrix::zeros(fused_det.len(), fused_trk.len());
    for (n, d) in fused_det.iter().enumerate() {
        for (m, t) in fused_trk.iter().enumerate() {
            let input = pair_input(d, t)?;
            let y = g3.net.infer(&g3.params, &input)?;
            alpha[(n, m)] = y.data()[0];
            beta[(n, m)] = y.data()[1];
        }
    }
    Ok((alpha, beta))
}

/// Per-feature confidence that a new track should be initialized.
pub fn init_score(fused: &[Tensor], g4: &InitNet) -> Result<Vec<f64>> {
    fused
        .iter()
        .map(|f| {
            let y = g4.net.infer(&g4.params, f)?;
            Ok(clamp_unit(y.data()[0]))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Supervision labels
// ---------------------------------------------------------------------------

/// Pair labels: 0 = matched pair, 1 = unmatched pair. A pair is matched iff
/// the track's nearest ground-truth box in the previous frame and the
/// detection's nearest ground-truth box in the current frame share an
/// identity, and both nearest-neighbor center distances are under 2 m.
/// Rows are detections, columns tracks. An empty ground-truth frame labels
/// everything unmatched.
pub fn label_pairs(
    det_centers: &[(f64, f64)],
    trk_centers: &[(f64, f64)],
    gt_curr: &[GtBox],
    gt_prev: &[GtBox],
) -> DMatrix<f64> {
    let nearest = |c: (f64, f64), boxes: &[GtBox]| -> Option<(u64, f64)> {
        boxes
            .iter()
            .map(|g| (g.identity, crate::types::dist2d(c, g.center2d())))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    };
    let det_nearest: Vec<Option<(u64, f64)>> =
        det_centers.iter().map(|&c| nearest(c, gt_curr)).collect();
    let trk_nearest: Vec<Option<(u64, f64)>> =
        trk_centers.iter().map(|&c| nearest(c, gt_prev)).collect();

    DMatrix::from_fn(det_centers.len(), trk_centers.len(), |n, m| {
        match (det_nearest[n], trk_nearest[m]) {
            (Some((di, dd)), Some((ti, td)))
                if di == ti && dd < PAIR_GATE_M && td < PAIR_GATE_M =>
            {
                0.0
            }
            _ => 1.0,
        }
    })
}

/// Track-initialization target: true iff any ground-truth center lies
/// within 2 m of the detection center.
pub fn init_target(det_center: (f64, f64), gt: &[GtBox]) -> bool {
    gt.iter()
        .any(|g| crate::types::dist2d(det_center, g.center2d()) < PAIR_GATE_M)
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn check_unit_open(values: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    for v in values {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Numerics(format!(
                "{what} value {v} outside the open interval (0,1)"
            )));
        }
    }
    Ok(())
}

/// Mean binary cross-entropy of the feature-distance grid against the pair
/// labels, with the distance read as the predicted probability of
/// "unmatched".
pub fn stage1_loss(d_feat: &DMatrix<f64>, labels: &DMatrix<f64>) -> Result<f64> {
    Ok(stage1_loss_grad(d_feat, labels)?.0)
}

/// Loss plus its gradient with respect to each feature-distance entry.
pub fn stage1_loss_grad(
    d_feat: &DMatrix<f64>,
    labels: &DMatrix<f64>,
) -> Result<(f64, DMatrix<f64>)> {
    if d_feat.shape() != labels.shape() {
        return Err(Error::Config(format!(
            "stage1 loss: distances {:?} vs labels {:?}",
            d_feat.shape(),
            labels.shape()
        )));
    }
    check_unit_open(d_feat.iter().copied(), "feature distance")?;
    let count = d_feat.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(d_feat.nrows(), d_feat.ncols());
    for n in 0..d_feat.nrows() {
        for m in 0..d_feat.ncols() {
            let p = d_feat[(n, m)];
            let y = labels[(n, m)];
            loss += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            grad[(n, m)] = (-y / p + (1.0 - y) / (1.0 - p)) / count;
        }
    }
    Ok((loss / count, grad))
}

/// Margin losses on the combined distance: contrastive separation between
/// every positive/negative pair, positives pushed below `t - c_pos`,
/// negatives pushed above `t + c_neg`. Empty positive or negative sets
/// contribute zero to the affected terms.
pub fn stage2_loss(
    d_combined: &DMatrix<f64>,
    labels: &DMatrix<f64>,
    constants: &LossConstants,
) -> Result<f64> {
    Ok(stage2_loss_grad(d_combined, labels, constants)?.0)
}

pub fn stage2_loss_grad(
    d_combined: &DMatrix<f64>,
    labels: &DMatrix<f64>,
    constants: &LossConstants,
) -> Result<(f64, DMatrix<f64>)> {
    if d_combined.shape() != labels.shape() {
        return Err(Error::Config(format!(
            "stage2 loss: distances {:?} vs labels {:?}",
            d_combined.shape(),
            labels.shape()
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for n in 0..labels.nrows() {
        for m in 0..labels.ncols() {
            if labels[(n, m)] == 0.0 {
                pos.push((n, m));
            } else {
                neg.push((n, m));
            }
        }
    }
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(d_combined.nrows(), d_combined.ncols());

    if !pos.is_empty() && !neg.is_empty() {
        let w = 1.0 / (pos.len() * neg.len()) as f64;
        for &(pn, pm) in &pos {
            let di = d_combined[(pn, pm)];
            for &(nn, nm) in &neg {
                let dj = d_combined[(nn, nm)];
                let margin = constants.c_contr - (dj - di);
                if margin > 0.0 {
                    loss += w * margin;
                    grad[(pn, pm)] += w;
                    grad[(nn, nm)] -= w;
                }
            }
        }
    }
    if !pos.is_empty() {
        let w = 1.0 / pos.len() as f64;
        for &(pn, pm) in &pos {
            let di = d_combined[(pn, pm)];
            let margin = constants.c_pos - (constants.t - di);
            if margin > 0.0 {
                loss += w * margin;
                grad[(pn, pm)] += w;
            }
        }
    }
    if !neg.is_empty() {
        let w = 1.0 / neg.len() as f64;
        for &(nn, nm) in &neg {
            let dj = d_combined[(nn, nm)];
            let margin = constants.c_neg - (dj - constants.t);
            if margin > 0.0 {
                loss += w * margin;
                grad[(nn, nm)] -= w;
            }
        }
    }
    Ok((loss, grad))
}

/// Mean binary cross-entropy of initialization scores against their
/// targets.
pub fn init_loss(scores: &[f64], targets: &[bool]) -> Result<f64> {
    Ok(init_loss_grad(scores, targets)?.0)
}

pub fn init_loss_grad(scores: &[f64], targets: &[bool]) -> Result<(f64, Vec<f64>)> {
    if scores.len() != targets.len() {
        return Err(Error::Config(format!(
            "init loss: {} scores vs {} targets",
            scores.len(),
            targets.len()
        )));
    }
    check_unit_open(scores.iter().copied(), "init score")?;
    let count = scores.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for (i, (&p, &t)) in scores.iter().zip(targets).enumerate() {
        let y = if t { 1.0 } else { 0.0 };
        loss += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        grad[i] = (-y / p + (1.0 - y) / (1.0 - p)) / count;
    }
    Ok((loss / count, grad))
}
