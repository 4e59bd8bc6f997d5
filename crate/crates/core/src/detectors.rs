//! Toy vehicle-centre detectors.
//!
//! Each architecture is a stack of 3x3 ReLU convolutions followed by a 1x1
//! logit head; the sigmoid of the head is a heatmap with one cell per
//! `stride x stride` pixel block. Training minimizes a focal loss against
//! Gaussian-splatted centre targets, and detections are the local maxima of
//! the heatmap.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{
    clip_global_norm, softplus, Conv2dParams, CustomOp, Optimizer, Tape, Tensor, TensorError, Var,
};
use crate::image::RgbImage;
use crate::render::{load_manifest, Sample};

/// Default centre-distance matching radius in pixels.
pub const MATCH_RADIUS: f64 = 12.0;
/// Minimum distance between reported peaks, pixels.
pub const PEAK_SEPARATION: f64 = MATCH_RADIUS;
/// Half-width, in cells, of the Gaussian centre target.
pub const TARGET_RADIUS: usize = 2;
/// Prior foreground probability encoded in the initial head bias.
pub const HEAD_PRIOR: f64 = 0.1;
const MAX_SCORE: f64 = 1.0 - 1e-12;
const ARCHIVE_MAGIC: &[u8; 4] = b"CFW1";

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}, gradient norm {grad_norm}")]
    Diverged { epoch: usize, step: usize, loss: f64, grad_norm: f64 },
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("not calibrated: detection threshold unset")]
    Uncalibrated,
    #[error("weights archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchId {
    #[serde(rename = "cnnA")]
    CnnA,
    #[serde(rename = "cnnB")]
    CnnB,
    #[serde(rename = "cnnC")]
    CnnC,
}

impl ArchId {
    pub const ALL: [ArchId; 3] = [ArchId::CnnA, ArchId::CnnB, ArchId::CnnC];

    fn blocks(self) -> Vec<Block> {
        let b = |in_c, out_c, stride, dilation| Block { in_c, out_c, stride, dilation };
        match self {
            // 4 blocks, stride 4, dilated tail for a wide receptive field
            ArchId::CnnA => vec![b(3, 8, 2, 1), b(8, 12, 2, 1), b(12, 12, 1, 2), b(12, 12, 1, 4)],
            // 6 blocks, stride 8
            ArchId::CnnB => {
                let mut v = vec![b(3, 8, 2, 1), b(8, 12, 2, 1), b(12, 16, 2, 1)];
                v.extend((0..3).map(|i| b(16, 16, 1, 1 + i % 2)));
                v
            }
            // 8 blocks, stride 4, narrow and deep
            ArchId::CnnC => {
                let mut v = vec![b(3, 6, 2, 1), b(6, 10, 2, 1)];
                v.extend([1, 2, 4, 1, 2, 4].map(|d| b(10, 10, 1, d)));
                v
            }
        }
    }

    /// Output cell size in pixels.
    pub fn stride(self) -> usize {
        self.blocks().iter().map(|b| b.stride).product()
    }

    /// Number of 3x3 convolution blocks before the head.
    pub fn depth(self) -> usize {
        self.blocks().len()
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchId::CnnA => "cnnA",
            ArchId::CnnB => "cnnB",
            ArchId::CnnC => "cnnC",
        })
    }
}

impl FromStr for ArchId {
    type Err = DetectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cnna" | "a" => Ok(ArchId::CnnA),
            "cnnb" | "b" => Ok(ArchId::CnnB),
            "cnnc" | "c" => Ok(ArchId::CnnC),
            other => Err(DetectError::Contract(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    in_c: usize,
    out_c: usize,
    stride: usize,
    dilation: usize,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorSpec {
    pub arch: ArchId,
    /// Alternating `[O, C, k, k]` weights and `[O]` biases, head last.
    pub weights: Vec<Tensor>,
    /// Set by calibration; required by [`DetectorSpec::detect`].
    pub threshold: Option<f64>,
}

impl DetectorSpec {
    /// He-initialized weights; the head bias starts at the logit of
    /// [`HEAD_PRIOR`].
    pub fn new(arch: ArchId, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD37E_C7);
        let mut weights = Vec::new();
        let blocks = arch.blocks();
        for b in &blocks {
            let fan_in = (b.in_c * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            weights.push(Tensor::from_fn(&[b.out_c, b.in_c, 3, 3], |_| std * normal(&mut rng)));
            weights.push(Tensor::zeros(&[b.out_c]));
        }
        let last = blocks.last().expect("non-empty").out_c;
        let std = (1.0 / last as f64).sqrt();
        weights.push(Tensor::from_fn(&[1, last, 1, 1], |_| std * normal(&mut rng)));
        weights.push(Tensor::full(&[1], (HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln()));
        Self { arch, weights, threshold: None }
    }

    pub fn stride(&self) -> usize {
        self.arch.stride()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    pub fn weight_names(&self) -> Vec<String> {
        let n = self.arch.depth();
        let mut names = Vec::with_capacity(2 * n + 2);
        for i in 0..n {
            names.push(format!("conv{i}.w"));
            names.push(format!("conv{i}.b"));
        }
        names.push("head.w".into());
        names.push("head.b".into());
        names
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        let fresh = DetectorSpec::new(self.arch, 0);
        if self.weights.len() != fresh.weights.len()
            || self.weights.iter().zip(&fresh.weights).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(DetectError::Contract(format!("weights do not match architecture {}", self.arch)));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(DetectError::Contract("non-finite weights".into()));
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t <= 1.0) {
                return Err(DetectError::Contract(format!("threshold {t} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Records the weights; `trainable` decides whether they receive gradients.
    pub fn weight_vars(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>, DetectError> {
        self.weights
            .iter()
            .map(|w| if trainable { tape.param(w.clone()) } else { tape.constant(w.clone()) })
            .collect::<Result<_, _>>()
            .map_err(Into::into)
    }

    /// `[1, H/stride, W/stride]` logits for a `[3, H, W]` image in `[0, 1]`.
    pub fn logits_on_tape(&self, tape: &mut Tape, weights: &[Var], image: Var) -> Result<Var, DetectError> {
        let shape = tape.shape(image).to_vec();
        let s = self.stride();
        if shape.len() != 3 || shape[0] != 3 || shape[1] % s != 0 || shape[2] % s != 0 {
            return Err(DetectError::Contract(format!("image {shape:?} must be [3, H, W] with H, W divisible by {s}")));
        }
        let blocks = self.arch.blocks();
        if weights.len() != 2 * blocks.len() + 2 {
            return Err(DetectError::Contract("weight list does not match architecture".into()));
        }
        let centred = vec![-0.5; tape.value(image).len()];
        let mut x = tape.add_const(image, &centred)?;
        for (i, b) in blocks.iter().enumerate() {
            let p = Conv2dParams { stride: b.stride, pad: b.dilation, dilation: b.dilation };
            let y = tape.conv2d(x, weights[2 * i], Some(weights[2 * i + 1]), p)?;
            x = tape.relu(y)?;
        }
        let n = blocks.len();
        Ok(tape.conv2d(x, weights[2 * n], Some(weights[2 * n + 1]), Conv2dParams::default())?)
    }

    /// Sigmoid heatmap on the tape, for attack losses.
    pub fn heatmap_on_tape(&self, tape: &mut Tape, weights: &[Var], image: Var) -> Result<Var, DetectError> {
        let z = self.logits_on_tape(tape, weights, image)?;
        Ok(tape.sigmoid(z)?)
    }

    pub fn heatmap(&self, image: &Tensor) -> Result<Heatmap, DetectError> {
        let mut tape = Tape::new();
        let w = self.weight_vars(&mut tape, false)?;
        let x = tape.constant(image.clone())?;
        let h = self.heatmap_on_tape(&mut tape, &w, x)?;
        let shape = tape.shape(h).to_vec();
        let scores = tape.data(h).iter().map(|p| p.min(MAX_SCORE)).collect();
        Ok(Heatmap { rows: shape[1], cols: shape[2], stride: self.stride(), scores })
    }

    /// Detections at the calibrated threshold.
    pub fn detect(&self, image: &Tensor) -> Result<DetectionSet, DetectError> {
        let t = self.threshold.ok_or(DetectError::Uncalibrated)?;
        self.detect_at(image, t)
    }

    pub fn detect_at(&self, image: &Tensor, threshold: f64) -> Result<DetectionSet, DetectError> {
        Ok(self.heatmap(image)?.peaks().above(threshold))
    }
}

/// Detector scores on the output cell grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    pub scores: Vec<f64>,
}

impl Heatmap {
    pub fn score(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.cols + col]
    }

    /// 3x3 local maxima, refined to sub-cell precision by a parabola through
    /// each axis. Plateaus keep their first cell in raster order, and a peak
    /// within [`PEAK_SEPARATION`] pixels of a stronger one is dropped.
    pub fn peaks(&self) -> DetectionSet {
        let (h, w) = (self.rows as isize, self.cols as isize);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let s = self.score(r as usize, c as usize);
                let mut is_max = true;
                'nb: for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        let (rr, cc) = (r + dr, c + dc);
                        if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= h || cc >= w {
                            continue;
                        }
                        let n = self.score(rr as usize, cc as usize);
                        let earlier = (dr, dc) < (0, 0);
                        if n > s || (earlier && n == s) {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if !is_max {
                    continue;
                }
                let at = |rr: isize, cc: isize| {
                    if rr < 0 || cc < 0 || rr >= h || cc >= w {
                        s
                    } else {
                        self.score(rr as usize, cc as usize)
                    }
                };
                let offset = |a: f64, b: f64| {
                    let curv = a - 2.0 * s + b;
                    if curv < 0.0 {
                        (0.5 * (a - b) / curv).clamp(-0.5, 0.5)
                    } else {
                        0.0
                    }
                };
                let dx = offset(at(r, c - 1), at(r, c + 1));
                let dy = offset(at(r - 1, c), at(r + 1, c));
                let st = self.stride as f64;
                out.push(Detection { center: [(c as f64 + 0.5 + dx) * st, (r as f64 + 0.5 + dy) * st], score: s });
            }
        }
        let sorted = DetectionSet::new(out);
        let r2 = PEAK_SEPARATION * PEAK_SEPARATION;
        let mut kept: Vec<Detection> = Vec::new();
        for d in sorted.iter() {
            if kept.iter().all(|k| dist2(k.center, d.center) > r2) {
                kept.push(*d);
            }
        }
        DetectionSet::new(kept)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center: [f64; 2],
    pub score: f64,
}

/// Detections of one image, in descending score order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(mut detections: Vec<Detection>) -> Self {
        detections.sort_by(|a, b| b.score.total_cmp(&a.score));
        Self { detections }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Detection> {
        self.detections.iter()
    }

    pub fn as_slice(&self) -> &[Detection] {
        &self.detections
    }

    /// Detections with `score >= threshold`.
    pub fn above(&self, threshold: f64) -> DetectionSet {
        Self { detections: self.detections.iter().copied().take_while(|d| d.score >= threshold).collect() }
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Greedy matching in descending score order: each detection takes the
/// nearest unmatched ground-truth centre within `radius`. Entry `i` is the
/// matched ground-truth index of detection `i`.
pub fn match_detections(dets: &DetectionSet, gt: &[[f64; 2]], radius: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gt.len()];
    let r2 = radius * radius;
    dets.iter()
        .map(|d| {
            let best = (0..gt.len())
                .filter(|&j| !taken[j])
                .map(|j| (j, dist2(d.center, gt[j])))
                .filter(|&(_, e)| e <= r2)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            best.map(|(j, _)| {
                taken[j] = true;
                j
            })
        })
        .collect()
}

fn check_pairs(dets: &[DetectionSet], gt: &[Vec<[f64; 2]>], radius: f64) -> Result<(), DetectError> {
    if dets.len() != gt.len() {
        return Err(DetectError::Contract(format!("{} detection sets for {} images", dets.len(), gt.len())));
    }
    if !(radius > 0.0) {
        return Err(DetectError::Contract(format!("match radius {radius} must be positive")));
    }
    Ok(())
}

/// All-points interpolated area under the precision-recall curve. The curve
/// has one point per distinct score. Zero when there is no ground truth.
pub fn average_precision(dets: &[DetectionSet], gt: &[Vec<[f64; 2]>], radius: f64) -> Result<f64, DetectError> {
    check_pairs(dets, gt, radius)?;
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Ok(0.0);
    }
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (d, g) in dets.iter().zip(gt) {
        let m = match_detections(d, g, radius);
        scored.extend(d.iter().zip(m).map(|(det, m)| (det.score, m.is_some())));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            tp += scored[i].1 as usize;
            seen += 1;
            i += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / seen as f64));
    }
    let mut ap = 0.0;
    let mut best = 0.0f64;
    let mut envelope = vec![0.0; points.len()];
    for k in (0..points.len()).rev() {
        best = best.max(points[k].1);
        envelope[k] = best;
    }
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_recall) * envelope[k];
        prev_recall = r;
    }
    Ok(ap)
}

/// F1 of detections at or above `threshold`.
pub fn f1_at(dets: &[DetectionSet], gt: &[Vec<[f64; 2]>], threshold: f64, radius: f64) -> Result<f64, DetectError> {
    check_pairs(dets, gt, radius)?;
    let (mut tp, mut fp, mut n_gt) = (0usize, 0usize, 0usize);
    for (d, g) in dets.iter().zip(gt) {
        let kept = d.above(threshold);
        let m = match_detections(&kept, g, radius);
        let hits = m.iter().filter(|x| x.is_some()).count();
        tp += hits;
        fp += m.len() - hits;
        n_gt += g.len();
    }
    let denom = 2 * tp + fp + (n_gt - tp);
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Grid `0.01, 0.02, ..., 0.99`.
pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (1..100).map(|k| k as f64 / 100.0)
}

/// F1-maximizing grid threshold over precomputed peak sets; ties go to the
/// lower threshold.
pub fn calibrate_from_peaks(peaks: &[DetectionSet], gt: &[Vec<[f64; 2]>], radius: f64) -> Result<f64, DetectError> {
    check_pairs(peaks, gt, radius)?;
    if gt.iter().all(Vec::is_empty) {
        return Err(DetectError::Calibration("validation set has no annotated vehicles".into()));
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in threshold_grid() {
        let f = f1_at(peaks, gt, t, radius)?;
        if f > best.0 {
            best = (f, t);
        }
    }
    Ok(best.1)
}

/// Raw pixels plus centre annotations, kept as bytes to bound memory.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub size: usize,
    /// Interleaved 8-bit RGB of a `size x size` image.
    pub pixels: Vec<u8>,
    pub centers: Vec<[f64; 2]>,
}

impl LabeledImage {
    pub fn chw(&self) -> Tensor {
        self.transformed(0).0
    }

    /// Image and centres under one of the 8 square symmetries: bit 0 flips
    /// columns, bit 1 flips rows, bit 2 transposes (applied last).
    pub fn transformed(&self, code: u8) -> (Tensor, Vec<[f64; 2]>) {
        let n = self.size;
        let plane = n * n;
        let mut out = vec![0.0; 3 * plane];
        for r in 0..n {
            for c in 0..n {
                let (mut rr, mut cc) = (r, c);
                if code & 1 != 0 {
                    cc = n - 1 - cc;
                }
                if code & 2 != 0 {
                    rr = n - 1 - rr;
                }
                if code & 4 != 0 {
                    std::mem::swap(&mut rr, &mut cc);
                }
                let src = 3 * (r * n + c);
                for ch in 0..3 {
                    out[ch * plane + rr * n + cc] = self.pixels[src + ch] as f64 / 255.0;
                }
            }
        }
        let size = n as f64;
        let centers = self
            .centers
            .iter()
            .map(|&[x, y]| {
                let x = if code & 1 != 0 { size - x } else { x };
                let y = if code & 2 != 0 { size - y } else { y };
                if code & 4 != 0 {
                    [y, x]
                } else {
                    [x, y]
                }
            })
            .collect();
        (Tensor::new(&[3, n, n], out).expect("3 x n x n"), centers)
    }
}

impl From<&Sample> for LabeledImage {
    fn from(s: &Sample) -> Self {
        Self { size: s.size, pixels: s.pixels.clone(), centers: s.centers() }
    }
}

/// Images and annotations of a dataset directory written by
/// [`crate::render::write_dataset`].
pub fn load_labeled(dir: &Path) -> Result<Vec<LabeledImage>, DetectError> {
    let records = load_manifest(dir).map_err(|e| DetectError::Contract(e.to_string()))?;
    records
        .into_iter()
        .map(|r| {
            let img = RgbImage::load_png(&dir.join(&r.path)).map_err(|e| DetectError::Contract(e.to_string()))?;
            if img.width != img.height {
                return Err(DetectError::Contract(format!("{}: images must be square", r.path)));
            }
            Ok(LabeledImage { size: img.width, pixels: img.to_u8(), centers: r.annotations })
        })
        .collect()
}

/// Gaussian centre targets on a `rows x cols` grid; the cell holding a
/// centre is exactly 1.
pub fn center_targets(centers: &[[f64; 2]], rows: usize, cols: usize, stride: usize) -> Vec<f64> {
    let mut t = vec![0.0f64; rows * cols];
    let sigma = (2 * TARGET_RADIUS + 1) as f64 / 6.0;
    let r = TARGET_RADIUS as isize;
    for &[x, y] in centers {
        let cx = ((x / stride as f64).floor() as isize).clamp(0, cols as isize - 1);
        let cy = ((y / stride as f64).floor() as isize).clamp(0, rows as isize - 1);
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (cy + dy, cx + dx);
                if yy < 0 || xx < 0 || yy >= rows as isize || xx >= cols as isize {
                    continue;
                }
                let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let cell = &mut t[yy as usize * cols + xx as usize];
                *cell = cell.max(g);
            }
        }
    }
    t
}

struct FocalLoss {
    target: Rc<Vec<f64>>,
    norm: f64,
}

impl CustomOp for FocalLoss {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let Some(dz) = grads[0].as_mut() else { return };
        let g = grad_out[0] / self.norm;
        for ((d, &z), &t) in dz.iter_mut().zip(inputs[0].data()).zip(self.target.iter()) {
            let p = crate::diffmath::sigmoid(z);
            *d += g * if t == 1.0 {
                -(1.0 - p).powi(2) * (2.0 * p * softplus(-z) + (1.0 - p))
            } else {
                (1.0 - t).powi(4) * p * p * (2.0 * (1.0 - p) * softplus(z) + p)
            };
        }
    }
}

/// Penalized focal loss on logits, normalized by the number of centre cells
/// (at least one). Cells with target exactly 1 are positives.
pub fn focal_loss_on_tape(tape: &mut Tape, logits: Var, target: Rc<Vec<f64>>) -> Result<Var, DetectError> {
    let z = tape.data(logits);
    if z.len() != target.len() {
        return Err(DetectError::Contract(format!("{} logits for {} targets", z.len(), target.len())));
    }
    let npos = target.iter().filter(|&&t| t == 1.0).count();
    let norm = npos.max(1) as f64;
    let mut loss = 0.0;
    for (&z, &t) in z.iter().zip(target.iter()) {
        let p = crate::diffmath::sigmoid(z);
        loss += if t == 1.0 { (1.0 - p).powi(2) * softplus(-z) } else { (1.0 - t).powi(4) * p * p * softplus(z) };
    }
    let out = Tensor::scalar(loss / norm);
    Ok(tape.custom(vec![logits], out, Box::new(FocalLoss { target, norm }))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr: f64,
    /// Random square symmetries per sample.
    pub augment: bool,
    /// Joint gradient norm cap.
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 8, batch: 8, seed: 0, lr: 3e-3, augment: true, clip: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
}

/// Mean focal loss of one batch with its weight gradients.
fn batch_loss(
    spec: &DetectorSpec,
    items: &[(Tensor, Vec<[f64; 2]>)],
) -> Result<(f64, Vec<Vec<f64>>), DetectError> {
    let mut tape = Tape::new();
    let w = spec.weight_vars(&mut tape, true)?;
    let mut total: Option<Var> = None;
    for (img, centers) in items {
        let x = tape.constant(img.clone())?;
        let z = spec.logits_on_tape(&mut tape, &w, x)?;
        let shape = tape.shape(z).to_vec();
        let t = center_targets(centers, shape[1], shape[2], spec.stride());
        let l = focal_loss_on_tape(&mut tape, z, Rc::new(t))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| DetectError::Contract("empty batch".into()))?;
    let mean = tape.scale(total, 1.0 / items.len() as f64)?;
    let mut grads = tape.backward(mean)?;
    let g = w.iter().map(|&v| grads.take(v)).collect();
    Ok((tape.data(mean)[0], g))
}

/// Adam on the focal loss with per-epoch shuffling from `cfg.seed`.
pub fn train_detector(
    spec: &DetectorSpec,
    data: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<(DetectorSpec, TrainReport), DetectError> {
    spec.validate()?;
    if data.iter().all(|d| d.centers.is_empty()) {
        return Err(DetectError::Contract("training set has no annotations".into()));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(DetectError::Contract("epochs and batch must be positive".into()));
    }
    let mut out = spec.clone();
    out.threshold = None;
    let refs: Vec<&Tensor> = out.weights.iter().collect();
    let mut opt = Optimizer::adam(cfg.lr, &refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let items: Vec<_> = chunk
                .iter()
                .map(|&i| data[i].transformed(if cfg.augment { rng.gen_range(0..8) } else { 0 }))
                .collect();
            let (loss, mut grads) = batch_loss(&out, &items)?;
            let grad_norm = clip_global_norm(&mut grads, cfg.clip);
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(DetectError::Diverged { epoch, step: steps, loss, grad_norm });
            }
            let mut params: Vec<&mut Tensor> = out.weights.iter_mut().collect();
            opt.step(&mut params, &grads)?;
            sum += loss;
            batches += 1;
            steps += 1;
        }
        curve.push(sum / batches as f64);
    }
    Ok((out, TrainReport { loss_curve: curve, steps }))
}

/// Peak sets of every image, in order.
pub fn peaks_for(spec: &DetectorSpec, data: &[LabeledImage]) -> Result<Vec<DetectionSet>, DetectError> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_iter().map(|d| Ok(spec.heatmap(&d.chw())?.peaks())).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.iter().map(|d| Ok(spec.heatmap(&d.chw())?.peaks())).collect()
    }
}

pub fn calibrate_threshold(spec: &DetectorSpec, valset: &[LabeledImage], radius: f64) -> Result<f64, DetectError> {
    let gt: Vec<_> = valset.iter().map(|d| d.centers.clone()).collect();
    calibrate_from_peaks(&peaks_for(spec, valset)?, &gt, radius)
}

/// AP over all heatmap peaks, independent of the detection threshold.
pub fn evaluate_ap(spec: &DetectorSpec, data: &[LabeledImage], radius: f64) -> Result<f64, DetectError> {
    let gt: Vec<_> = data.iter().map(|d| d.centers.clone()).collect();
    average_precision(&peaks_for(spec, data)?, &gt, radius)
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    arch: ArchId,
    threshold: Option<f64>,
    dtype: String,
    tensors: Vec<ArchiveEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

/// Archive layout: magic `CFW1`, little-endian `u64` header length, JSON
/// header, then the little-endian `f64` payload. Offsets are relative to the
/// payload start.
pub fn weights_to_bytes(spec: &DetectorSpec) -> Vec<u8> {
    let mut offset = 0;
    let tensors = spec
        .weight_names()
        .into_iter()
        .zip(&spec.weights)
        .map(|(name, w)| {
            let e = ArchiveEntry { name, shape: w.shape().to_vec(), offset, nbytes: 8 * w.len() };
            offset += e.nbytes;
            e
        })
        .collect();
    let header = ArchiveHeader { arch: spec.arch, threshold: spec.threshold, dtype: "f64le".into(), tensors };
    let json = serde_json::to_vec(&header).expect("serializable header");
    let mut out = Vec::with_capacity(12 + json.len() + offset);
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for w in &spec.weights {
        for v in w.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<DetectorSpec, DetectError> {
    let bad = |m: &str| DetectError::Archive(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != ARCHIVE_MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = 12usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: ArchiveHeader =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| DetectError::Archive(e.to_string()))?;
    if header.dtype != "f64le" {
        return Err(DetectError::Archive(format!("unsupported dtype {}", header.dtype)));
    }
    let payload = &bytes[body..];
    let mut weights = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let end = e.offset.checked_add(e.nbytes).filter(|&x| x <= payload.len()).ok_or_else(|| bad("truncated payload"))?;
        let data: Vec<f64> = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        weights.push(Tensor::new(&e.shape, data).map_err(|err| DetectError::Archive(format!("{}: {err}", e.name)))?);
    }
    let spec = DetectorSpec { arch: header.arch, weights, threshold: header.threshold };
    if spec.weight_names() != header.tensors.iter().map(|e| e.name.clone()).collect::<Vec<_>>() {
        return Err(bad("tensor names do not match architecture"));
    }
    spec.validate()?;
    Ok(spec)
}

pub fn save_weights(spec: &DetectorSpec, path: &Path) -> Result<(), DetectError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&weights_to_bytes(spec))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<DetectorSpec, DetectError> {
    weights_from_bytes(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub dataset: String,
    pub ap: f64,
    pub threshold: f64,
}

pub const EVAL_CSV_HEADER: &str = "model,dataset,AP,threshold";

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{EVAL_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.2}\n", r.model, r.dataset, r.ap, r.threshold));
    }
    s
}
