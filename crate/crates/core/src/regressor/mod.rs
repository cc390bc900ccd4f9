//! Trainable patch-to-keypoints regressor.
//!
//! A small residual convolutional network maps an 80x80x3 detection patch to the 14
//! patch-frame coordinates of the seven cone keypoints. The training
//! loss is the squared coordinate error plus a penalty on the deviation
//! of each predicted arm's cross-ratio from the cone's 3D constant,
//! which pulls predictions toward projectively consistent layouts.

mod layers;
mod serialize;

pub use layers::Elem;
pub use serialize::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cone::{ConeGeometry, KeypointFrame, CR_3D, LEFT_ARM, RIGHT_ARM};
use crate::synth::{PatchImage, PatchSample, DEFAULT_MARGIN_FRAC, PATCH_SIZE};
use layers::{add_relu_forward, relu_backward, relu_forward, BatchNorm2d, Conv2d, Linear, Tensor};

/// Distances inside the loss's cross-ratio terms are clamped here so the
/// gradient stays finite when predicted points coincide early in
/// training (the clamped region contributes zero gradient).
pub const LOSS_DISTANCE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("convolution output size would be non-positive (in {in_size}, kernel {kernel}, pad {padding}, stride {stride}, dilation {dilation})")]
    NonPositiveOutput {
        in_size: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
        dilation: usize,
    },
    #[error("input shape mismatch: net expects {expected} px patches, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    DivergedLoss { epoch: usize, loss: f64 },
    #[error("corrupt model file: {0}")]
    CorruptFile(String),
    #[error("model version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Spatial size after a convolution:
/// floor((in + 2*padding - dilation*(kernel-1) - 1) / stride + 1).
pub fn conv_output_shape(
    in_size: usize,
    kernel: usize,
    padding: usize,
    stride: usize,
    dilation: usize,
) -> Result<usize, RegressorError> {
    assert!(in_size >= 1 && kernel >= 1 && stride >= 1 && dilation >= 1);
    let numer = in_size as isize + 2 * padding as isize - (dilation * (kernel - 1)) as isize - 1;
    if numer < 0 {
        return Err(RegressorError::NonPositiveOutput { in_size, kernel, padding, stride, dilation });
    }
    Ok((numer / stride as isize + 1) as usize)
}

// ==== LOSS ====

/// Cross-ratio of four points with epsilon-guarded distances, plus its
/// gradient with respect to each coordinate.
fn guarded_cross_ratio_grad(p: &[(f64, f64); 4]) -> (f64, [(f64, f64); 4]) {
    // Pairs entering Cr = (d13 * d24) / (d14 * d23), with log-sign.
    const PAIRS: [(usize, usize, f64); 4] =
        [(0, 2, 1.0), (1, 3, 1.0), (0, 3, -1.0), (1, 2, -1.0)];
    let mut dists = [0.0; 4];
    let mut units = [(0.0, 0.0); 4];
    for (k, (i, j, _)) in PAIRS.iter().enumerate() {
        let dx = p[*i].0 - p[*j].0;
        let dy = p[*i].1 - p[*j].1;
        let d = (dx * dx + dy * dy).sqrt();
        if d < LOSS_DISTANCE_EPS {
            dists[k] = LOSS_DISTANCE_EPS;
            units[k] = (0.0, 0.0);
        } else {
            dists[k] = d;
            units[k] = (dx / d, dy / d);
        }
    }
    let cr = (dists[0] * dists[1]) / (dists[2] * dists[3]);
    let mut grad = [(0.0, 0.0); 4];
    for (k, (i, j, sign)) in PAIRS.iter().enumerate() {
        // d(ln Cr)/d(d_k) = sign / d_k, so dCr/d(d_k) = sign * Cr / d_k.
        let scale = sign * cr / dists[k];
        let (ux, uy) = units[k];
        grad[*i].0 += scale * ux;
        grad[*i].1 += scale * uy;
        grad[*j].0 -= scale * ux;
        grad[*j].1 -= scale * uy;
    }
    (cr, grad)
}

fn arm_points(v: &[f64; 14], arm: [usize; 4]) -> [(f64, f64); 4] {
    let mut p = [(0.0, 0.0); 4];
    for (k, idx) in arm.iter().enumerate() {
        p[k] = (v[2 * idx], v[2 * idx + 1]);
    }
    p
}

/// Squared coordinate error plus `gamma` times the squared deviation of
/// each predicted arm's cross-ratio from `cr3d`.
pub fn keypoint_loss(pred: &[f64; 14], gt: &[f64; 14], gamma: f64, cr3d: f64) -> f64 {
    keypoint_loss_and_gradient(pred, gt, gamma, cr3d).0
}

/// Analytic gradient of [`keypoint_loss`] with respect to `pred`.
pub fn keypoint_loss_gradient(pred: &[f64; 14], gt: &[f64; 14], gamma: f64, cr3d: f64) -> [f64; 14] {
    keypoint_loss_and_gradient(pred, gt, gamma, cr3d).1
}

pub fn keypoint_loss_and_gradient(
    pred: &[f64; 14],
    gt: &[f64; 14],
    gamma: f64,
    cr3d: f64,
) -> (f64, [f64; 14]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 14];
    for i in 0..14 {
        let d = pred[i] - gt[i];
        loss += d * d;
        grad[i] = 2.0 * d;
    }
    if gamma > 0.0 {
        for arm in [LEFT_ARM, RIGHT_ARM] {
            let pts = arm_points(pred, arm);
            let (cr, dcr) = guarded_cross_ratio_grad(&pts);
            let dev = cr - cr3d;
            loss += gamma * dev * dev;
            let scale = 2.0 * gamma * dev;
            for (k, idx) in arm.iter().enumerate() {
                grad[2 * idx] += scale * dcr[k].0;
                grad[2 * idx + 1] += scale * dcr[k].1;
            }
        }
    }
    (loss, grad)
}

/// Mean absolute deviation view of one arm's guarded cross-ratio.
pub fn arm_cross_ratio(pred: &[f64; 14], arm: [usize; 4]) -> f64 {
    guarded_cross_ratio_grad(&arm_points(pred, arm)).0
}

/// Keypoint layout of a centered, upright cone filling a square patch
/// whose crop applied `margin_frac` dilation per side. Used to seed the
/// output bias so an untrained net predicts the average layout.
pub fn canonical_patch_layout(g: &ConeGeometry, margin_frac: f64) -> [f64; 14] {
    let s = PATCH_SIZE as f64;
    let lo = s * margin_frac / (1.0 + 2.0 * margin_frac);
    let hi = s * (1.0 + margin_frac) / (1.0 + 2.0 * margin_frac);
    let apex = (0.5 * s, lo);
    let lb = (lo, hi);
    let rb = (hi, hi);
    let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
    let pts = [
        apex,
        lerp(apex, lb, g.t2),
        lerp(apex, lb, g.t3),
        lb,
        lerp(apex, rb, g.t2),
        lerp(apex, rb, g.t3),
        rb,
    ];
    let mut v = [0.0; 14];
    for (i, p) in pts.iter().enumerate() {
        v[2 * i] = p.0;
        v[2 * i + 1] = p.1;
    }
    v
}

// ==== CONFIGURATION ====

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub input_size: usize,
    /// Channel width of the stem; blocks use 1x, 2x, 4x, 8x.
    pub base_width: usize,
    pub batchnorm: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { input_size: PATCH_SIZE, base_width: 8, batchnorm: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epoch numbers (1-based) after which the learning rate is scaled.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Cross-ratio penalty weight.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0001,
            momentum: 0.9,
            batch_size: 128,
            epochs: 250,
            lr_decay_epochs: vec![75, 100],
            lr_decay_factor: 0.1,
            gamma: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RegressorError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(RegressorError::InvalidConfig("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(RegressorError::InvalidConfig("momentum must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(RegressorError::InvalidConfig("batch_size must be at least 1"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(RegressorError::InvalidConfig("gamma must be non-negative"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(RegressorError::InvalidConfig("lr_decay_factor must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    /// Mean per-sample loss (same gamma as requested).
    pub mean_loss: f64,
    /// RMS Euclidean error per keypoint, pixels.
    pub per_keypoint_rms: [f64; 7],
    /// Mean |Cr(predicted arm) - CR_3D| for the left and right arm.
    pub mean_cr_err: [f64; 2],
}

/// Metrics over externally produced predictions. The net-based
/// [`RegressorNetT::evaluate`] funnels through this.
pub fn evaluate_predictions(
    preds: &[[f64; 14]],
    gts: &[[f64; 14]],
    gamma: f64,
) -> Result<EvalMetrics, RegressorError> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(RegressorError::EmptyDataset);
    }
    let n = preds.len() as f64;
    let mut mean_loss = 0.0;
    let mut sq = [0.0; 7];
    let mut cr_err = [0.0; 2];
    for (p, t) in preds.iter().zip(gts.iter()) {
        mean_loss += keypoint_loss(p, t, gamma, CR_3D);
        for k in 0..7 {
            let dx = p[2 * k] - t[2 * k];
            let dy = p[2 * k + 1] - t[2 * k + 1];
            sq[k] += dx * dx + dy * dy;
        }
        for (a, arm) in [LEFT_ARM, RIGHT_ARM].into_iter().enumerate() {
            cr_err[a] += (arm_cross_ratio(p, arm) - CR_3D).abs();
        }
    }
    let mut rms = [0.0; 7];
    for k in 0..7 {
        rms[k] = (sq[k] / n).sqrt();
    }
    Ok(EvalMetrics {
        mean_loss: mean_loss / n,
        per_keypoint_rms: rms,
        mean_cr_err: [cr_err[0] / n, cr_err[1] / n],
    })
}

// ==== NETWORK ====

#[derive(Debug, Clone)]
struct Block<E> {
    conv1: Conv2d<E>,
    bn1: Option<BatchNorm2d<E>>,
    conv2: Conv2d<E>,
    bn2: Option<BatchNorm2d<E>>,
    conv_sc: Conv2d<E>,
    bn_sc: Option<BatchNorm2d<E>>,
}

/// Residual patch-to-14-vector regressor, generic over the scalar type
/// (f32 in production; f64 in gradient-verification tests).
#[derive(Debug, Clone)]
pub struct RegressorNetT<E: Elem> {
    cfg: NetConfig,
    stem_conv: Conv2d<E>,
    stem_bn: Option<BatchNorm2d<E>>,
    blocks: Vec<Block<E>>,
    fc: Linear<E>,
    /// Spatial size after the stem and each block.
    spatial: [usize; 5],
}

/// Production instantiation.
pub type RegressorNet = RegressorNetT<f32>;

/// Forward/backward scratch space; reused across minibatches.
///
/// The per-layer column buffers are filled by the train-mode forward and
/// consumed by the backward pass, which avoids re-unfolding every input
/// (the single largest non-GEMM cost). Eval-mode forwards share `dcol`.
struct Workspace<E> {
    input: Tensor<E>,
    stem: Tensor<E>,
    b_outs: [Tensor<E>; 4],
    a1s: [Tensor<E>; 4],
    sc: Tensor<E>,
    stem_col: Vec<E>,
    cols1: [Vec<E>; 4],
    cols2: [Vec<E>; 4],
    cols_sc: [Vec<E>; 4],
    dcol: Vec<E>,
    feat: Vec<E>,
    fc_out: Vec<E>,
    d_feat: Vec<E>,
    d_fc: Vec<E>,
    d_a: Tensor<E>,
    d_b: Tensor<E>,
    d_sc: Tensor<E>,
}

impl<E: Elem> Workspace<E> {
    fn new() -> Self {
        let t = || Tensor::zeros(1, 1, 1, 1);
        Self {
            input: t(),
            stem: t(),
            b_outs: [t(), t(), t(), t()],
            a1s: [t(), t(), t(), t()],
            sc: t(),
            stem_col: Vec::new(),
            cols1: [Vec::new(), Vec::new(), Vec::new(), Vec::new()],
            cols2: [Vec::new(), Vec::new(), Vec::new(), Vec::new()],
            cols_sc: [Vec::new(), Vec::new(), Vec::new(), Vec::new()],
            dcol: Vec::new(),
            feat: Vec::new(),
            fc_out: Vec::new(),
            d_feat: Vec::new(),
            d_fc: Vec::new(),
            d_a: t(),
            d_b: t(),
            d_sc: t(),
        }
    }
}

impl<E: Elem> RegressorNetT<E> {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self, RegressorError> {
        if cfg.input_size < 8 {
            return Err(RegressorError::InvalidConfig("input_size must be at least 8"));
        }
        if cfg.base_width == 0 {
            return Err(RegressorError::InvalidConfig("base_width must be at least 1"));
        }
        let w = cfg.base_width;
        let widths = [w, 2 * w, 4 * w, 8 * w];

        // Shape chain, asserted up front so a bad config cannot produce
        // a net whose flatten size disagrees with the head.
        let s0 = conv_output_shape(cfg.input_size, 3, 1, 1, 1)?;
        let mut spatial = [s0, 0, 0, 0, 0];
        for i in 0..4 {
            let main = conv_output_shape(spatial[i], 3, 1, 2, 1)?;
            let short = conv_output_shape(spatial[i], 1, 0, 2, 1)?;
            if main != short {
                return Err(RegressorError::InvalidConfig("residual branch shapes diverge"));
            }
            let inner = conv_output_shape(main, 3, 1, 1, 1)?;
            if inner != main {
                return Err(RegressorError::InvalidConfig("same-convolution changed size"));
            }
            spatial[i + 1] = main;
        }
        let flat = widths[3] * spatial[4] * spatial[4];

        // Parameter draw order is fixed: stem, blocks in order
        // (conv1, conv2, shortcut), head.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bn = |c: usize, on: bool| if on { Some(BatchNorm2d::new(c)) } else { None };
        let stem_conv = Conv2d::new(3, w, 3, 1, 1, &mut rng);
        let stem_bn = bn(w, cfg.batchnorm);
        let mut blocks = Vec::with_capacity(4);
        let mut c_in = w;
        for &c_out in &widths {
            blocks.push(Block {
                conv1: Conv2d::new(c_in, c_out, 3, 2, 1, &mut rng),
                bn1: bn(c_out, cfg.batchnorm),
                conv2: Conv2d::new(c_out, c_out, 3, 1, 1, &mut rng),
                bn2: bn(c_out, cfg.batchnorm),
                conv_sc: Conv2d::new(c_in, c_out, 1, 2, 0, &mut rng),
                bn_sc: bn(c_out, cfg.batchnorm),
            });
            c_in = c_out;
        }
        let mut fc = Linear::new(flat, 14, &mut rng);
        // Bias starts at the average keypoint layout so early training
        // refines positions instead of discovering the output scale.
        let layout = canonical_patch_layout(&ConeGeometry::default(), DEFAULT_MARGIN_FRAC);
        for (b, v) in fc.bias.iter_mut().zip(layout.iter()) {
            *b = E::from_f64(*v);
        }
        Ok(Self { cfg: *cfg, stem_conv, stem_bn, blocks, fc, spatial })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn parameter_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// All learned tensors (including normalization running statistics)
    /// in serialization order.
    pub(crate) fn param_tensors(&self) -> Vec<&[E]> {
        let mut out: Vec<&[E]> = Vec::new();
        fn push_bn<'a, E: Elem>(out: &mut Vec<&'a [E]>, bn: &'a Option<BatchNorm2d<E>>) {
            if let Some(bn) = bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
                out.push(&bn.running_mean);
                out.push(&bn.running_var);
            }
        }
        out.push(&self.stem_conv.weight);
        out.push(&self.stem_conv.bias);
        push_bn(&mut out, &self.stem_bn);
        for b in &self.blocks {
            out.push(&b.conv1.weight);
            out.push(&b.conv1.bias);
            push_bn(&mut out, &b.bn1);
            out.push(&b.conv2.weight);
            out.push(&b.conv2.bias);
            push_bn(&mut out, &b.bn2);
            out.push(&b.conv_sc.weight);
            out.push(&b.conv_sc.bias);
            push_bn(&mut out, &b.bn_sc);
        }
        out.push(&self.fc.weight);
        out.push(&self.fc.bias);
        out
    }

    pub(crate) fn param_tensors_mut(&mut self) -> Vec<&mut Vec<E>> {
        let mut out: Vec<&mut Vec<E>> = Vec::new();
        fn push_bn<'a, E: Elem>(out: &mut Vec<&'a mut Vec<E>>, bn: &'a mut Option<BatchNorm2d<E>>) {
            if let Some(bn) = bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        out.push(&mut self.stem_conv.weight);
        out.push(&mut self.stem_conv.bias);
        push_bn(&mut out, &mut self.stem_bn);
        for b in &mut self.blocks {
            out.push(&mut b.conv1.weight);
            out.push(&mut b.conv1.bias);
            push_bn(&mut out, &mut b.bn1);
            out.push(&mut b.conv2.weight);
            out.push(&mut b.conv2.bias);
            push_bn(&mut out, &mut b.bn2);
            out.push(&mut b.conv_sc.weight);
            out.push(&mut b.conv_sc.bias);
            push_bn(&mut out, &mut b.bn_sc);
        }
        out.push(&mut self.fc.weight);
        out.push(&mut self.fc.bias);
        out
    }

    fn check_patch_input(&self) -> Result<(), RegressorError> {
        if self.cfg.input_size != PATCH_SIZE {
            return Err(RegressorError::ShapeMismatch {
                expected: self.cfg.input_size,
                got: PATCH_SIZE,
            });
        }
        Ok(())
    }

    fn load_patches(&self, ws: &mut Workspace<E>, patches: &[&PatchImage]) {
        let s = self.cfg.input_size;
        let b = patches.len();
        ws.input.resize(3, b, s, s);
        let hw = s * s;
        for (bi, patch) in patches.iter().enumerate() {
            for c in 0..3 {
                let dst = &mut ws.input.data[(c * b + bi) * hw..(c * b + bi + 1) * hw];
                for y in 0..s {
                    for x in 0..s {
                        dst[y * s + x] = E::from_f64(patch.get(x, y, c) as f64);
                    }
                }
            }
        }
    }

    /// Flattens the last feature map (C,B,HW) into per-sample rows.
    fn flatten(&self, ws: &mut Workspace<E>, b: usize) {
        let t = &ws.b_outs[3];
        let hw = t.h * t.w;
        let f = t.c * hw;
        ws.feat.resize(b * f, E::ZERO);
        for c in 0..t.c {
            for bi in 0..b {
                let src = &t.data[(c * b + bi) * hw..(c * b + bi + 1) * hw];
                ws.feat[bi * f + c * hw..bi * f + (c + 1) * hw].copy_from_slice(src);
            }
        }
    }

    fn forward_eval_ws(&self, ws: &mut Workspace<E>, b: usize) {
        self.stem_conv.forward(&ws.input, &mut ws.dcol, &mut ws.stem);
        if let Some(bn) = &self.stem_bn {
            bn.forward_eval(&mut ws.stem);
        }
        relu_forward(&mut ws.stem);
        for i in 0..4 {
            let blk = &self.blocks[i];
            let (done, rest) = ws.b_outs.split_at_mut(i);
            let input_act: &Tensor<E> = if i == 0 { &ws.stem } else { &done[i - 1] };
            let out = &mut rest[0];
            let a1 = &mut ws.a1s[i];
            blk.conv1.forward(input_act, &mut ws.dcol, a1);
            if let Some(bn) = &blk.bn1 {
                bn.forward_eval(a1);
            }
            relu_forward(a1);
            blk.conv2.forward(a1, &mut ws.dcol, out);
            if let Some(bn) = &blk.bn2 {
                bn.forward_eval(out);
            }
            blk.conv_sc.forward(input_act, &mut ws.dcol, &mut ws.sc);
            if let Some(bn) = &blk.bn_sc {
                bn.forward_eval(&mut ws.sc);
            }
            add_relu_forward(out, &ws.sc);
        }
        self.flatten(ws, b);
        self.fc.forward(&ws.feat, b, &mut ws.fc_out);
    }

    fn forward_train_ws(&mut self, ws: &mut Workspace<E>, b: usize) {
        self.stem_conv.forward(&ws.input, &mut ws.stem_col, &mut ws.stem);
        if let Some(bn) = self.stem_bn.as_mut() {
            bn.forward_train(&mut ws.stem);
        }
        relu_forward(&mut ws.stem);
        for i in 0..4 {
            let blk = &mut self.blocks[i];
            let (done, rest) = ws.b_outs.split_at_mut(i);
            let input_act: &Tensor<E> = if i == 0 { &ws.stem } else { &done[i - 1] };
            let out = &mut rest[0];
            let a1 = &mut ws.a1s[i];
            blk.conv1.forward(input_act, &mut ws.cols1[i], a1);
            if let Some(bn) = blk.bn1.as_mut() {
                bn.forward_train(a1);
            }
            relu_forward(a1);
            blk.conv2.forward(a1, &mut ws.cols2[i], out);
            if let Some(bn) = blk.bn2.as_mut() {
                bn.forward_train(out);
            }
            blk.conv_sc.forward(input_act, &mut ws.cols_sc[i], &mut ws.sc);
            if let Some(bn) = blk.bn_sc.as_mut() {
                bn.forward_train(&mut ws.sc);
            }
            add_relu_forward(out, &ws.sc);
        }
        self.flatten(ws, b);
        self.fc.forward(&ws.feat, b, &mut ws.fc_out);
    }

    /// Backward from `ws.d_fc` (dL/d output, B x 14). Must follow a
    /// train-mode forward on the same batch (it reuses the cached
    /// unfolded inputs).
    fn backward_ws(&mut self, ws: &mut Workspace<E>, b: usize) {
        let t3 = (self.blocks[3].conv2.out_c, self.spatial[4]);
        let f = t3.0 * t3.1 * t3.1;
        ws.d_feat.resize(b * f, E::ZERO);
        self.fc.backward(&ws.feat, &ws.d_fc, b, &mut ws.d_feat);
        // Unflatten into CBHW.
        let hw = t3.1 * t3.1;
        ws.d_a.resize(t3.0, b, t3.1, t3.1);
        for c in 0..t3.0 {
            for bi in 0..b {
                let dst = &mut ws.d_a.data[(c * b + bi) * hw..(c * b + bi + 1) * hw];
                dst.copy_from_slice(&ws.d_feat[bi * f + c * hw..bi * f + (c + 1) * hw]);
            }
        }
        for i in (0..4).rev() {
            let blk = &mut self.blocks[i];
            relu_backward(&mut ws.d_a, &ws.b_outs[i]);
            let (c, h, w) = (ws.d_a.c, ws.d_a.h, ws.d_a.w);
            ws.d_sc.resize(c, b, h, w);
            ws.d_sc.data.copy_from_slice(&ws.d_a.data);
            if let Some(bn) = blk.bn2.as_mut() {
                bn.backward(&mut ws.d_a);
            }
            let a1 = &ws.a1s[i];
            ws.d_b.resize(a1.c, b, a1.h, a1.w);
            blk.conv2.backward(&ws.d_a, &ws.cols2[i], &mut ws.dcol, Some(&mut ws.d_b));
            relu_backward(&mut ws.d_b, a1);
            if let Some(bn) = blk.bn1.as_mut() {
                bn.backward(&mut ws.d_b);
            }
            {
                let (done, _) = ws.b_outs.split_at(i);
                let input_act: &Tensor<E> = if i == 0 { &ws.stem } else { &done[i - 1] };
                ws.d_a.resize(input_act.c, b, input_act.h, input_act.w);
                blk.conv1.backward(&ws.d_b, &ws.cols1[i], &mut ws.dcol, Some(&mut ws.d_a));
                if let Some(bn) = blk.bn_sc.as_mut() {
                    bn.backward(&mut ws.d_sc);
                }
                ws.d_b.resize(input_act.c, b, input_act.h, input_act.w);
                blk.conv_sc.backward(&ws.d_sc, &ws.cols_sc[i], &mut ws.dcol, Some(&mut ws.d_b));
            }
            for (a, s) in ws.d_a.data.iter_mut().zip(ws.d_b.data.iter()) {
                *a = *a + *s;
            }
        }
        relu_backward(&mut ws.d_a, &ws.stem);
        if let Some(bn) = self.stem_bn.as_mut() {
            bn.backward(&mut ws.d_a);
        }
        self.stem_conv.backward(&ws.d_a, &ws.stem_col, &mut ws.dcol, None);
    }

    fn sgd_step(&mut self, lr: f64, momentum: f64) {
        let lr = E::from_f64(lr);
        let mu = E::from_f64(momentum);
        self.stem_conv.sgd_step(lr, mu);
        if let Some(bn) = self.stem_bn.as_mut() {
            bn.sgd_step(lr, mu);
        }
        for b in &mut self.blocks {
            b.conv1.sgd_step(lr, mu);
            if let Some(bn) = b.bn1.as_mut() {
                bn.sgd_step(lr, mu);
            }
            b.conv2.sgd_step(lr, mu);
            if let Some(bn) = b.bn2.as_mut() {
                bn.sgd_step(lr, mu);
            }
            b.conv_sc.sgd_step(lr, mu);
            if let Some(bn) = b.bn_sc.as_mut() {
                bn.sgd_step(lr, mu);
            }
        }
        self.fc.sgd_step(lr, mu);
    }

    fn fc_out_to_pred(row: &[E]) -> [f64; 14] {
        let mut p = [0.0; 14];
        for (d, s) in p.iter_mut().zip(row.iter()) {
            *d = s.to_f64();
        }
        p
    }

    /// Eval-mode forward of a single patch.
    pub fn forward(&self, patch: &PatchImage) -> Result<[f64; 14], RegressorError> {
        self.check_patch_input()?;
        let mut ws = Workspace::new();
        self.load_patches(&mut ws, &[patch]);
        self.forward_eval_ws(&mut ws, 1);
        Ok(Self::fc_out_to_pred(&ws.fc_out[0..14]))
    }

    /// Eval-mode forward of many patches, batched internally.
    pub fn forward_batch(&self, patches: &[&PatchImage]) -> Result<Vec<[f64; 14]>, RegressorError> {
        self.check_patch_input()?;
        let mut ws = Workspace::new();
        let mut preds = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(256) {
            self.load_patches(&mut ws, chunk);
            self.forward_eval_ws(&mut ws, chunk.len());
            for row in ws.fc_out.chunks_exact(14).take(chunk.len()) {
                preds.push(Self::fc_out_to_pred(row));
            }
        }
        Ok(preds)
    }

    /// SGD with momentum over shuffled minibatches. Returns the
    /// per-epoch history: the mean training loss over the epoch's
    /// minibatches (computed in train mode as the batches are visited).
    pub fn train(
        &mut self,
        samples: &[PatchSample],
        cfg: &TrainConfig,
    ) -> Result<Vec<f64>, RegressorError> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(RegressorError::EmptyDataset);
        }
        self.check_patch_input()?;
        let targets: Vec<[f64; 14]> = samples
            .iter()
            .map(|s| {
                debug_assert_eq!(s.keypoints.frame, KeypointFrame::Patch);
                s.keypoints.to_vec14()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut lr = cfg.learning_rate;
        let mut ws = Workspace::new();
        let mut history = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss_sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let patches: Vec<&PatchImage> = batch.iter().map(|&i| &samples[i].patch).collect();
                let b = patches.len();
                self.load_patches(&mut ws, &patches);
                self.forward_train_ws(&mut ws, b);
                ws.d_fc.resize(b * 14, E::ZERO);
                let inv_b = 1.0 / b as f64;
                let mut batch_loss = 0.0;
                for (bi, row) in ws.fc_out.chunks_exact(14).take(b).enumerate() {
                    let pred = Self::fc_out_to_pred(row);
                    let (l, g) = keypoint_loss_and_gradient(&pred, &targets[batch[bi]], cfg.gamma, CR_3D);
                    batch_loss += l * inv_b;
                    for (j, gv) in g.iter().enumerate() {
                        ws.d_fc[bi * 14 + j] = E::from_f64(gv * inv_b);
                    }
                }
                if !batch_loss.is_finite() {
                    return Err(RegressorError::DivergedLoss { epoch, loss: batch_loss });
                }
                epoch_loss_sum += batch_loss * b as f64;
                self.backward_ws(&mut ws, b);
                self.sgd_step(lr, cfg.momentum);
            }
            if cfg.lr_decay_epochs.contains(&(epoch + 1)) {
                lr *= cfg.lr_decay_factor;
            }
            history.push(epoch_loss_sum / samples.len() as f64);
        }
        Ok(history)
    }

    /// Eval-mode metrics; parameters are not mutated.
    pub fn evaluate(&self, samples: &[PatchSample], gamma: f64) -> Result<EvalMetrics, RegressorError> {
        if samples.is_empty() {
            return Err(RegressorError::EmptyDataset);
        }
        self.check_patch_input()?;
        let refs: Vec<&PatchImage> = samples.iter().map(|s| &s.patch).collect();
        let preds = self.forward_batch(&refs)?;
        let gts: Vec<[f64; 14]> = samples.iter().map(|s| s.keypoints.to_vec14()).collect();
        evaluate_predictions(&preds, &gts, gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::model_cross_ratio;
    use crate::geometry::{cross_ratio_2d, CameraModel, Point2};
    use crate::synth::{generate_dataset, NoiseParams};
    use rand::Rng;

    fn cam() -> CameraModel {
        CameraModel::new(600.0, 600.0, 800.0, 400.0, 1600, 800).unwrap()
    }

    fn small_dataset(n: usize, seed: u64) -> Vec<PatchSample> {
        generate_dataset(
            &cam(),
            &ConeGeometry::default(),
            n,
            4.0,
            14.0,
            1.2,
            &NoiseParams::default(),
            0.15,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn conv_output_shape_formula_cases() {
        assert_eq!(conv_output_shape(80, 3, 1, 1, 1).unwrap(), 80);
        assert_eq!(conv_output_shape(80, 2, 0, 2, 1).unwrap(), 40);
        assert_eq!(conv_output_shape(1, 1, 0, 1, 1).unwrap(), 1);
        assert_eq!(conv_output_shape(80, 3, 1, 2, 1).unwrap(), 40);
        assert_eq!(conv_output_shape(10, 3, 0, 1, 2).unwrap(), 6);
        assert!(matches!(
            conv_output_shape(1, 3, 0, 1, 1),
            Err(RegressorError::NonPositiveOutput { .. })
        ));
        assert!(matches!(
            conv_output_shape(4, 3, 0, 1, 3),
            Err(RegressorError::NonPositiveOutput { .. })
        ));
    }

    #[test]
    fn loss_zero_at_consistent_ground_truth() {
        let layout = canonical_patch_layout(&ConeGeometry::default(), DEFAULT_MARGIN_FRAC);
        let loss = keypoint_loss(&layout, &layout, 1.0, CR_3D);
        assert!(loss.abs() < 1e-18, "loss {loss}");
    }

    #[test]
    fn loss_pure_sse_when_gamma_zero() {
        let layout = canonical_patch_layout(&ConeGeometry::default(), DEFAULT_MARGIN_FRAC);
        let mut pred = layout;
        for i in 0..7 {
            pred[2 * i] += 1.0;
        }
        let loss = keypoint_loss(&pred, &layout, 0.0, CR_3D);
        assert!((loss - 7.0).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn loss_of_point_displaced_along_arm_matches_cross_ratio_oracle() {
        let g = ConeGeometry::default();
        let gt = canonical_patch_layout(&g, DEFAULT_MARGIN_FRAC);
        // Move p3 (left lower interface, index 2) by +2 px along the arm.
        let apex = Point2::new(gt[0], gt[1]);
        let lb = Point2::new(gt[6], gt[7]);
        let len = apex.dist(lb);
        let dir = ((lb.x - apex.x) / len, (lb.y - apex.y) / len);
        let mut pred = gt;
        pred[4] += 2.0 * dir.0;
        pred[5] += 2.0 * dir.1;

        let arm = [
            Point2::new(pred[0], pred[1]),
            Point2::new(pred[2], pred[3]),
            Point2::new(pred[4], pred[5]),
            Point2::new(pred[6], pred[7]),
        ];
        let d_cr = cross_ratio_2d(&arm).unwrap() - CR_3D;
        let want = 4.0 + d_cr * d_cr;
        let got = keypoint_loss(&pred, &gt, 1.0, CR_3D);
        // The untouched right arm contributes only float dust.
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn loss_nonnegative_and_monotone_in_gamma() {
        let gt = canonical_patch_layout(&ConeGeometry::default(), DEFAULT_MARGIN_FRAC);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut pred = gt;
            for v in pred.iter_mut() {
                *v += rng.random_range(-3.0..3.0);
            }
            let mut prev = -1.0;
            for gamma in [0.0, 0.1, 1.0, 10.0] {
                let l = keypoint_loss(&pred, &gt, gamma, CR_3D);
                assert!(l >= 0.0);
                assert!(l > prev, "gamma ladder broken: {l} after {prev}");
                prev = l;
            }
        }
    }

    #[test]
    fn loss_gradient_is_plain_sse_gradient_when_gamma_zero() {
        let gt = canonical_patch_layout(&ConeGeometry::default(), DEFAULT_MARGIN_FRAC);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut pred = gt;
        for v in pred.iter_mut() {
            *v += rng.random_range(-5.0..5.0);
        }
        let grad = keypoint_loss_gradient(&pred, &gt, 0.0, CR_3D);
        for i in 0..14 {
            assert!((grad[i] - 2.0 * (pred[i] - gt[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradient_vanishes_at_global_minimum() {
        let gt = canonical_patch_layout(&ConeGeometry::default(), DEFAULT_MARGIN_FRAC);
        let grad = keypoint_loss_gradient(&gt, &gt, 1.0, CR_3D);
        for g in grad {
            assert!(g.abs() < 1e-9, "gradient {g}");
        }
    }

    /// Relative error between analytic and central-difference gradients.
    fn fd_relative_error(pred: &[f64; 14], gt: &[f64; 14], gamma: f64) -> f64 {
        let analytic = keypoint_loss_gradient(pred, gt, gamma, CR_3D);
        let h = 1e-4;
        let mut fd = [0.0; 14];
        for i in 0..14 {
            let mut up = *pred;
            up[i] += h;
            let mut dn = *pred;
            dn[i] -= h;
            fd[i] = (keypoint_loss(&up, gt, gamma, CR_3D) - keypoint_loss(&dn, gt, gamma, CR_3D))
                / (2.0 * h);
        }
        let num: f64 = analytic
            .iter()
            .zip(fd.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den = analytic
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(fd.iter().map(|v| v * v).sum::<f64>().sqrt())
            .max(1e-12);
        num / den
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let mut pred = [0.0; 14];
            let mut gt = [0.0; 14];
            for i in 0..14 {
                pred[i] = rng.random_range(5.0..75.0);
                gt[i] = rng.random_range(5.0..75.0);
            }
            for gamma in [0.0, 0.1, 1.0, 10.0] {
                let rel = fd_relative_error(&pred, &gt, gamma);
                assert!(rel < 1e-4, "rel err {rel} at gamma {gamma}");
            }
        }
    }

    #[test]
    fn loss_stays_finite_with_coincident_points() {
        let gt = canonical_patch_layout(&ConeGeometry::default(), DEFAULT_MARGIN_FRAC);
        // All predicted points collapse onto one location.
        let pred = [40.0, 40.0, 40.0, 40.0, 40.0, 40.0, 40.0, 40.0, 40.0, 40.0, 40.0, 40.0, 40.0, 40.0];
        let (loss, grad) = keypoint_loss_and_gradient(&pred, &gt, 1.0, CR_3D);
        assert!(loss.is_finite());
        for g in grad {
            assert!(g.is_finite());
        }
    }

    #[test]
    fn canonical_layout_arms_carry_the_model_cross_ratio() {
        let g = ConeGeometry::default();
        let v = canonical_patch_layout(&g, DEFAULT_MARGIN_FRAC);
        for arm in [LEFT_ARM, RIGHT_ARM] {
            let pts = [
                Point2::new(v[2 * arm[0]], v[2 * arm[0] + 1]),
                Point2::new(v[2 * arm[1]], v[2 * arm[1] + 1]),
                Point2::new(v[2 * arm[2]], v[2 * arm[2] + 1]),
                Point2::new(v[2 * arm[3]], v[2 * arm[3] + 1]),
            ];
            let cr = cross_ratio_2d(&pts).unwrap();
            assert!((cr - model_cross_ratio(&g)).abs() < 1e-12);
        }
        for i in 0..7 {
            assert!(v[2 * i] >= 0.0 && v[2 * i] <= 80.0);
            assert!(v[2 * i + 1] >= 0.0 && v[2 * i + 1] <= 80.0);
        }
    }

    #[test]
    fn net_shape_chain_and_head_size() {
        let net = RegressorNet::new(&NetConfig::default(), 0).unwrap();
        assert_eq!(net.spatial, [80, 40, 20, 10, 5]);
        assert_eq!(net.fc.in_f, 64 * 25);
        assert_eq!(net.fc.out_f, 14);
        let custom = RegressorNetT::<f32>::new(
            &NetConfig { input_size: 64, base_width: 4, batchnorm: false },
            1,
        )
        .unwrap();
        assert_eq!(custom.spatial, [64, 32, 16, 8, 4]);
        assert_eq!(custom.fc.in_f, 32 * 16);
        assert!(matches!(
            RegressorNet::new(&NetConfig { input_size: 4, base_width: 8, batchnorm: true }, 0),
            Err(RegressorError::InvalidConfig(_))
        ));
        assert!(matches!(
            RegressorNet::new(&NetConfig { input_size: 80, base_width: 0, batchnorm: true }, 0),
            Err(RegressorError::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_patch_through_zeroed_head_returns_bias_layout() {
        let mut net = RegressorNet::new(&NetConfig::default(), 3).unwrap();
        net.fc.weight.fill(0.0);
        let out = net.forward(&PatchImage::new_filled(0.0)).unwrap();
        let layout = canonical_patch_layout(&ConeGeometry::default(), DEFAULT_MARGIN_FRAC);
        for (o, l) in out.iter().zip(layout.iter()) {
            assert!((o - l).abs() < 1e-4, "{o} vs {l}");
        }
    }

    #[test]
    fn forward_output_is_finite_and_shape_checked() {
        let net = RegressorNet::new(&NetConfig::default(), 4).unwrap();
        let out = net.forward(&PatchImage::new_filled(0.5)).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        let narrow = RegressorNet::new(
            &NetConfig { input_size: 40, base_width: 2, batchnorm: true },
            4,
        )
        .unwrap();
        assert!(matches!(
            narrow.forward(&PatchImage::new_filled(0.5)),
            Err(RegressorError::ShapeMismatch { expected: 40, got: 80 })
        ));
    }

    /// Mean loss of a tiny f64 net on a fixed raw batch; clones the net
    /// so batch-norm state cannot leak between evaluations.
    fn tiny_net_loss(
        net: &RegressorNetT<f64>,
        input: &[f64],
        b: usize,
        targets: &[[f64; 14]],
    ) -> f64 {
        let mut net = net.clone();
        let mut ws = Workspace::new();
        let s = net.cfg.input_size;
        ws.input.resize(3, b, s, s);
        ws.input.data.copy_from_slice(input);
        net.forward_train_ws(&mut ws, b);
        let mut total = 0.0;
        for (bi, row) in ws.fc_out.chunks_exact(14).take(b).enumerate() {
            let pred = RegressorNetT::<f64>::fc_out_to_pred(row);
            total += keypoint_loss(&pred, &targets[bi], 1.0, CR_3D) / b as f64;
        }
        total
    }

    fn whole_net_gradient_check(batchnorm: bool) {
        let cfg = NetConfig { input_size: 8, base_width: 2, batchnorm };
        let net = RegressorNetT::<f64>::new(&cfg, 21).unwrap();
        let b = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let input: Vec<f64> = (0..3 * b * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        // Targets near the bias-initialised output keep the loss small so
        // finite differences stay above float roundoff.
        let layout = canonical_patch_layout(&ConeGeometry::default(), DEFAULT_MARGIN_FRAC);
        let mut targets = [[0.0; 14]; 2];
        for t in targets.iter_mut() {
            for (v, l) in t.iter_mut().zip(layout.iter()) {
                *v = l + rng.random_range(-8.0..8.0);
            }
        }

        // Reference gradients via one train-mode forward/backward.
        let mut net_b = net.clone();
        let mut ws = Workspace::new();
        ws.input.resize(3, b, 8, 8);
        ws.input.data.copy_from_slice(&input);
        net_b.forward_train_ws(&mut ws, b);
        ws.d_fc.resize(b * 14, 0.0);
        for (bi, row) in ws.fc_out.clone().chunks_exact(14).take(b).enumerate() {
            let pred = RegressorNetT::<f64>::fc_out_to_pred(row);
            let (_, g) = keypoint_loss_and_gradient(&pred, &targets[bi], 1.0, CR_3D);
            for (j, gv) in g.iter().enumerate() {
                ws.d_fc[bi * 14 + j] = gv / b as f64;
            }
        }
        net_b.backward_ws(&mut ws, b);

        type Mutate = fn(&mut RegressorNetT<f64>, f64);
        type GetGrad = fn(&RegressorNetT<f64>) -> f64;
        let mut probes: Vec<(&str, Mutate, GetGrad)> = vec![
            ("stem w", |n, d| n.stem_conv.weight[5] += d, |n| n.stem_conv.grad_w[5]),
            ("stem b", |n, d| n.stem_conv.bias[1] += d, |n| n.stem_conv.grad_b[1]),
            ("b0 conv1 w", |n, d| n.blocks[0].conv1.weight[7] += d, |n| n.blocks[0].conv1.grad_w[7]),
            ("b1 conv2 w", |n, d| n.blocks[1].conv2.weight[11] += d, |n| n.blocks[1].conv2.grad_w[11]),
            ("b2 sc w", |n, d| n.blocks[2].conv_sc.weight[3] += d, |n| n.blocks[2].conv_sc.grad_w[3]),
            ("b3 conv1 b", |n, d| n.blocks[3].conv1.bias[2] += d, |n| n.blocks[3].conv1.grad_b[2]),
            ("fc w", |n, d| n.fc.weight[40] += d, |n| n.fc.grad_w[40]),
            ("fc b", |n, d| n.fc.bias[9] += d, |n| n.fc.grad_b[9]),
        ];
        if batchnorm {
            probes.push((
                "stem bn g",
                |n, d| n.stem_bn.as_mut().unwrap().gamma[1] += d,
                |n| n.stem_bn.as_ref().unwrap().grad_g[1],
            ));
            probes.push((
                "b2 bn2 beta",
                |n, d| n.blocks[2].bn2.as_mut().unwrap().beta[3] += d,
                |n| n.blocks[2].bn2.as_ref().unwrap().grad_b[3],
            ));
        }
        let h = 1e-5;
        for (name, mutate, get_grad) in probes {
            let analytic = get_grad(&net_b);
            let mut up = net.clone();
            mutate(&mut up, h);
            let mut dn = net.clone();
            mutate(&mut dn, -h);
            let fd = (tiny_net_loss(&up, &input, b, &targets)
                - tiny_net_loss(&dn, &input, b, &targets))
                / (2.0 * h);
            // Wiring bugs show up as O(1) relative error; this bound sits
            // far above FD truncation noise yet far below any such bug.
            // The scale floor turns the check absolute for gradients that
            // batch-norm squeezes towards zero.
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "{name}: analytic {analytic} vs fd {fd} (rel {rel})");
        }
    }

    #[test]
    fn backprop_matches_finite_differences_with_batchnorm() {
        whole_net_gradient_check(true);
    }

    #[test]
    fn backprop_matches_finite_differences_without_batchnorm() {
        whole_net_gradient_check(false);
    }

    #[test]
    fn single_sample_overfits_below_one_squared_pixel() {
        let samples = small_dataset(1, 40);
        let mut net = RegressorNet::new(
            &NetConfig { input_size: 80, base_width: 4, batchnorm: true },
            7,
        )
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 1,
            epochs: 200,
            lr_decay_epochs: vec![120, 170],
            lr_decay_factor: 0.5,
            gamma: 1.0,
            seed: 1,
        };
        let history = net.train(&samples, &cfg).unwrap();
        assert_eq!(history.len(), 200);
        let last = *history.last().unwrap();
        assert!(last < 1.0, "final loss {last}");
        assert!(last < history[0], "no improvement: {history:?}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let samples = small_dataset(24, 41);
        let cfg = TrainConfig {
            learning_rate: 5e-4,
            momentum: 0.9,
            batch_size: 8,
            epochs: 4,
            lr_decay_epochs: vec![],
            lr_decay_factor: 0.1,
            gamma: 1.0,
            seed: 5,
        };
        let mut net_a = RegressorNet::new(&NetConfig::default(), 9).unwrap();
        let hist_a = net_a.train(&samples, &cfg).unwrap();
        let mut net_b = RegressorNet::new(&NetConfig::default(), 9).unwrap();
        let hist_b = net_b.train(&samples, &cfg).unwrap();
        assert_eq!(hist_a.len(), hist_b.len());
        for (a, b) in hist_a.iter().zip(hist_b.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (ta, tb) in net_a.param_tensors().iter().zip(net_b.param_tensors().iter()) {
            for (a, b) in ta.iter().zip(tb.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn history_is_finite_positive_and_one_entry_per_epoch() {
        let samples = small_dataset(24, 42);
        let cfg = TrainConfig {
            learning_rate: 5e-4,
            momentum: 0.9,
            batch_size: 8,
            epochs: 3,
            lr_decay_epochs: vec![],
            lr_decay_factor: 0.1,
            gamma: 1.0,
            seed: 2,
        };
        let mut net = RegressorNet::new(&NetConfig::default(), 10).unwrap();
        let history = net.train(&samples, &cfg).unwrap();
        assert_eq!(history.len(), cfg.epochs);
        assert!(history.iter().all(|l| l.is_finite() && *l > 0.0));
        // Rendered noise keeps the loss away from zero, so training on
        // real samples must also leave evaluate() finite and positive.
        let m = net.evaluate(&samples, cfg.gamma).unwrap();
        assert!(m.mean_loss.is_finite() && m.mean_loss > 0.0);
    }

    #[test]
    fn train_rejects_empty_and_bad_configs_and_divergence() {
        let mut net = RegressorNet::new(&NetConfig::default(), 11).unwrap();
        assert!(matches!(
            net.train(&[], &TrainConfig::default()),
            Err(RegressorError::EmptyDataset)
        ));
        let samples = small_dataset(8, 43);
        let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(matches!(net.train(&samples, &bad), Err(RegressorError::InvalidConfig(_))));
        let bad = TrainConfig { momentum: 1.0, ..TrainConfig::default() };
        assert!(matches!(net.train(&samples, &bad), Err(RegressorError::InvalidConfig(_))));
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(matches!(net.train(&samples, &bad), Err(RegressorError::InvalidConfig(_))));
        let bad = TrainConfig { gamma: -1.0, ..TrainConfig::default() };
        assert!(matches!(net.train(&samples, &bad), Err(RegressorError::InvalidConfig(_))));

        let explode = TrainConfig {
            learning_rate: 1e6,
            momentum: 0.9,
            batch_size: 4,
            epochs: 10,
            lr_decay_epochs: vec![],
            lr_decay_factor: 0.1,
            gamma: 1.0,
            seed: 3,
        };
        assert!(matches!(
            net.train(&samples, &explode),
            Err(RegressorError::DivergedLoss { .. })
        ));
    }

    #[test]
    fn perfect_predictions_give_zero_metrics() {
        let samples = small_dataset(6, 44);
        let gts: Vec<[f64; 14]> = samples.iter().map(|s| s.keypoints.to_vec14()).collect();
        let m = evaluate_predictions(&gts, &gts, 1.0).unwrap();
        assert!(m.mean_loss < 1e-12);
        assert!(m.per_keypoint_rms.iter().all(|v| *v < 1e-12));
        // Rendered arms deviate from the constant only by float dust.
        assert!(m.mean_cr_err.iter().all(|v| *v < 1e-9));
        assert!(matches!(
            evaluate_predictions(&[], &[], 1.0),
            Err(RegressorError::EmptyDataset)
        ));
    }

    #[test]
    fn model_file_roundtrip_preserves_behavior_bitwise() {
        let samples = small_dataset(8, 45);
        let mut net = RegressorNet::new(&NetConfig::default(), 12).unwrap();
        let cfg = TrainConfig {
            learning_rate: 5e-4,
            momentum: 0.9,
            batch_size: 4,
            epochs: 2,
            lr_decay_epochs: vec![],
            lr_decay_factor: 0.1,
            gamma: 1.0,
            seed: 4,
        };
        net.train(&samples, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.kprn");
        save_model(&path, &net).unwrap();
        let back: RegressorNet = load_model(&path).unwrap();
        assert_eq!(back.config(), net.config());
        for (ta, tb) in net.param_tensors().iter().zip(back.param_tensors().iter()) {
            assert_eq!(ta.len(), tb.len());
            for (a, b) in ta.iter().zip(tb.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let probe = &samples[0].patch;
        let a = net.forward(probe).unwrap();
        let b = back.forward(probe).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn model_file_rejects_corruption() {
        let net = RegressorNet::new(&NetConfig::default(), 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.kprn");
        save_model(&path, &net).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_model::<f32, _>(&path),
            Err(RegressorError::CorruptFile(_))
        ));

        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_model::<f32, _>(&path),
            Err(RegressorError::VersionMismatch { found: 7, expected: MODEL_VERSION })
        ));

        std::fs::write(&path, &good[..good.len() - 9]).unwrap();
        assert!(matches!(
            load_model::<f32, _>(&path),
            Err(RegressorError::CorruptFile(_))
        ));

        let mut bad = good.clone();
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_model::<f32, _>(&path),
            Err(RegressorError::CorruptFile(_))
        ));

        // First tensor length field (right after the 21-byte header) lies.
        let mut bad = good.clone();
        bad[21..29].copy_from_slice(&999u64.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_model::<f32, _>(&path),
            Err(RegressorError::CorruptFile(_))
        ));
    }

    /// Phase timing probe; not a correctness test.
    #[test]
    #[ignore]
    fn phase_timing_probe() {
        use std::time::Instant;
        let samples = small_dataset(128, 98);
        let refs: Vec<&PatchImage> = samples.iter().map(|s| &s.patch).collect();
        let mut net = RegressorNet::new(&NetConfig::default(), 0).unwrap();
        let mut ws = Workspace::new();
        let b = 128;

        let t = Instant::now();
        for _ in 0..4 {
            net.load_patches(&mut ws, &refs);
        }
        println!("load_patches x4: {:.3}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        for _ in 0..4 {
            net.forward_train_ws(&mut ws, b);
        }
        println!("forward_train x4: {:.3}s", t.elapsed().as_secs_f64());

        ws.d_fc.resize(b * 14, 0.0);
        let t = Instant::now();
        for _ in 0..4 {
            net.backward_ws(&mut ws, b);
        }
        println!("backward x4: {:.3}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        for _ in 0..4 {
            net.sgd_step(1e-9, 0.9);
        }
        println!("sgd_step x4: {:.3}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        for _ in 0..4 {
            net.forward_eval_ws(&mut ws, b);
        }
        println!("forward_eval x4: {:.3}s", t.elapsed().as_secs_f64());

    }

    /// Wall-clock probe for sizing training runs; not a correctness test.
    #[test]
    #[ignore]
    fn epoch_throughput_probe() {
        let t0 = std::time::Instant::now();
        let samples = small_dataset(2000, 99);
        let gen_s = t0.elapsed().as_secs_f64();
        println!("dataset 2000: {gen_s:.1}s");
        for width in [4usize, 8] {
            let mut net = RegressorNet::new(
                &NetConfig { input_size: 80, base_width: width, batchnorm: true },
                0,
            )
            .unwrap();
            let cfg = TrainConfig {
                learning_rate: 2e-3,
                momentum: 0.9,
                batch_size: 128,
                epochs: 2,
                lr_decay_epochs: vec![],
                lr_decay_factor: 0.1,
                gamma: 1.0,
                seed: 0,
            };
            let t1 = std::time::Instant::now();
            let history = net.train(&samples, &cfg).unwrap();
            let train_s = t1.elapsed().as_secs_f64();
            println!(
                "width {width}: {:.2}s/epoch; losses {history:?}",
                train_s / 2.0
            );
        }
    }

    /// Rehearses the gamma-on vs gamma-off comparison; not a correctness
    /// test.
    #[test]
    #[ignore]
    fn cross_ratio_regularization_probe() {
        let samples = small_dataset(2000, 99);
        let test_set = small_dataset(500, 77);
        let mut results = Vec::new();
        for gamma in [1.0, 0.0] {
            let mut net = RegressorNet::new(
                &NetConfig { input_size: 80, base_width: 4, batchnorm: true },
                0,
            )
            .unwrap();
            let cfg = TrainConfig {
                learning_rate: 2e-3,
                momentum: 0.9,
                batch_size: 128,
                epochs: 24,
                lr_decay_epochs: vec![16, 21],
                lr_decay_factor: 0.1,
                gamma,
                seed: 0,
            };
            net.train(&samples, &cfg).unwrap();
            let m = net.evaluate(&test_set, 1.0).unwrap();
            let cr = (m.mean_cr_err[0] + m.mean_cr_err[1]) / 2.0;
            println!(
                "gamma {gamma}: cr_err {cr:.6} rms {:?}",
                m.per_keypoint_rms
            );
            results.push(cr);
        }
        println!("gamma=1 {} gamma=0 {}", results[0], results[1]);
    }

    #[test]
    fn untrained_net_scores_worse_than_trained_net() {
        let train_set = small_dataset(48, 46);
        let test_set = small_dataset(16, 47);
        let fresh = RegressorNet::new(&NetConfig::default(), 14).unwrap();
        let before = fresh.evaluate(&test_set, 1.0).unwrap();
        let mut net = fresh.clone();
        let cfg = TrainConfig {
            learning_rate: 2e-3,
            momentum: 0.9,
            batch_size: 16,
            epochs: 30,
            lr_decay_epochs: vec![20],
            lr_decay_factor: 0.5,
            gamma: 1.0,
            seed: 6,
        };
        net.train(&train_set, &cfg).unwrap();
        let after = net.evaluate(&test_set, 1.0).unwrap();
        assert!(
            after.mean_loss < before.mean_loss,
            "training did not help: {} -> {}",
            before.mean_loss,
            after.mean_loss
        );
        let max_before = before.per_keypoint_rms.iter().cloned().fold(0.0, f64::max);
        let max_after = after.per_keypoint_rms.iter().cloned().fold(0.0, f64::max);
        assert!(max_after < max_before);
    }
}
