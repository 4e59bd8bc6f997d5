//! Adversarial camouflage optimization against a frozen detector ensemble.
//!
//! Every attack image holds one vehicle. A step renders a batch of pool
//! scenes through the differentiable path (texture composition, optional
//! displacement, rasterization, compositing), scores it with the ensemble
//! loss against an empty ground truth, clips the latent gradient to norm 1
//! and applies the optimizer.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camotex::{
    compose_on_tape, compose_texture, original_paint, paint_mask, palette_from_backgrounds, project_colors,
    renormalize_probs, ConstraintFlags, Palette, TexError, TextureMap, TextureParam,
};
use crate::detectors::{average_precision, focal_loss_on_tape, DetectError, DetectionSet, DetectorSpec};
use crate::diffmath::{clip_global_norm, Optimizer, OptimizerKind, Tape, Tensor, TensorError, Var};
use crate::evalmetrics::{easr, match_outcomes, p1, AttackRates, MatchedEvalResult};
use crate::image::RgbImage;
use crate::meshgeom::{
    apply_displacement, build_topology_map, displace_on_tape, symmetrize, DisplacementField, Mesh, MeshError,
    TopologyMap,
};
use crate::render::{
    composite_on_tape, image_to_chw, rasterize, render_with, texture_tensor, vehicle_center_pixel, vertex_tensor,
    Annotation, BackgroundSource, MeshRef, RenderConfig, RenderError, SceneSampler, SceneSpec, VehicleAppearance,
    VehicleInput,
};

/// Post-clip gradient norm bound.
pub const CLIP_NORM: f64 = 1.0;
/// Relative loss improvement below which a parallel block counts as flat.
pub const PLATEAU_TOL: f64 = 1e-4;
pub const PLATEAU_BLOCKS: usize = 3;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("all initial detector losses must be positive; got {0:?}")]
    DegenerateLoss(Vec<f64>),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize, snapshot: Box<Snapshot> },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Texture(#[from] TexError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Detector(#[from] DetectError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Last finite latents before a divergence.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub texture: Option<TextureParam>,
    pub field: Option<DisplacementField>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackMode {
    Texture,
    Shape,
    CombinedSeq,
    CombinedPar,
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMode::Texture => "texture",
            AttackMode::Shape => "shape",
            AttackMode::CombinedSeq => "combined_seq",
            AttackMode::CombinedPar => "combined_par",
        })
    }
}

impl FromStr for AttackMode {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "texture" => Ok(AttackMode::Texture),
            "shape" => Ok(AttackMode::Shape),
            "combined_seq" | "seq" | "sequential" => Ok(AttackMode::CombinedSeq),
            "combined_par" | "par" | "parallel" => Ok(AttackMode::CombinedPar),
            other => Err(AttackError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub flags: ConstraintFlags,
    /// Per-detector weights; `None` balances them at the initial latents.
    pub lambdas: Option<Vec<f64>>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shape_learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub n_pll: usize,
    pub pm: f64,
    pub tau: f64,
    pub seed: u64,
    /// Distinct scenes in the attack pool.
    pub pool_size: usize,
    pub scenes_per_epoch: usize,
    pub image_size: usize,
    pub n_colors: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::Texture,
            flags: ConstraintFlags::NONE,
            lambdas: None,
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.2,
            shape_learning_rate: 0.5,
            optimizer: OptimizerKind::Adam,
            n_pll: 5,
            pm: 0.2,
            tau: crate::diffmath::DEFAULT_TAU,
            seed: 0,
            pool_size: 256,
            scenes_per_epoch: 64,
            image_size: 192,
            n_colors: crate::camotex::DEFAULT_COLORS,
        }
    }
}

/// Keys accepted by [`AttackConfig::apply_kv`], in file order.
pub const CONFIG_KEYS: [&str; 16] = [
    "mode",
    "flags",
    "lambdas",
    "epochs",
    "batch_size",
    "learning_rate",
    "shape_learning_rate",
    "optimizer",
    "n_pll",
    "pm",
    "tau",
    "seed",
    "pool_size",
    "scenes_per_epoch",
    "image_size",
    "n_colors",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, AttackError> {
    v.parse().map_err(|_| AttackError::Config(format!("{key}: cannot parse {v:?}")))
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        self.flags.validate().map_err(|e| AttackError::Config(e.to_string()))?;
        if let Some(l) = &self.lambdas {
            if l.is_empty() || l.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(AttackError::Config(format!("lambdas must be positive, got {l:?}")));
            }
        }
        if self.n_pll == 0 {
            return Err(AttackError::Config("n_pll must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pm) {
            return Err(AttackError::Config(format!("pm {} outside [0,1]", self.pm)));
        }
        if !(self.tau > 0.0) {
            return Err(AttackError::Config(format!("tau {} must be positive", self.tau)));
        }
        if self.batch_size == 0 || self.pool_size == 0 || self.scenes_per_epoch == 0 {
            return Err(AttackError::Config("batch_size, pool_size and scenes_per_epoch must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.shape_learning_rate > 0.0) {
            return Err(AttackError::Config("learning rates must be positive".into()));
        }
        if matches!(self.mode, AttackMode::CombinedSeq | AttackMode::CombinedPar) && self.flags.ma {
            return Err(AttackError::Config("combined attacks do not use the Ma constraint".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.scenes_per_epoch.div_ceil(self.batch_size)
    }

    /// Sets one `key = value` entry.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), AttackError> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "flags" => self.flags = v.parse()?,
            "lambdas" => {
                self.lambdas = if v.eq_ignore_ascii_case("auto") {
                    None
                } else {
                    Some(v.split(',').map(|x| parse("lambdas", x.trim())).collect::<Result<_, _>>()?)
                }
            }
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "shape_learning_rate" => self.shape_learning_rate = parse(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "n_pll" => self.n_pll = parse(key, v)?,
            "pm" => self.pm = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "pool_size" => self.pool_size = parse(key, v)?,
            "scenes_per_epoch" => self.scenes_per_epoch = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "n_colors" => self.n_colors = parse(key, v)?,
            other => return Err(AttackError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file; `#` starts a comment.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<(), AttackError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AttackError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.apply_kv(k, v)?;
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self, AttackError> {
        let mut c = Self::default();
        c.apply_kv_text(text)?;
        Ok(c)
    }

    pub fn to_kv_text(&self) -> String {
        let lambdas = match &self.lambdas {
            None => "auto".to_string(),
            Some(l) => l.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
        };
        let values = [
            self.mode.to_string(),
            self.flags.to_string(),
            lambdas,
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.learning_rate.to_string(),
            self.shape_learning_rate.to_string(),
            self.optimizer.to_string(),
            self.n_pll.to_string(),
            self.pm.to_string(),
            self.tau.to_string(),
            self.seed.to_string(),
            self.pool_size.to_string(),
            self.scenes_per_epoch.to_string(),
            self.image_size.to_string(),
            self.n_colors.to_string(),
        ];
        CONFIG_KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// One pre-rendered single-vehicle scene.
#[derive(Clone, Debug)]
pub struct PoolScene {
    pub scene: SceneSpec,
    pub background: RgbImage,
    /// Index into [`ScenePool::meshes`].
    pub mesh: usize,
}

pub struct PoolMesh {
    pub mesh_ref: MeshRef,
    pub mesh: Mesh,
    pub topology: TopologyMap,
}

/// Fixed scenes for attack optimization or evaluation.
pub struct ScenePool {
    pub render: RenderConfig,
    pub scenes: Vec<PoolScene>,
    pub meshes: Vec<PoolMesh>,
}

impl ScenePool {
    pub fn sample(render: RenderConfig, n: usize, seed: u64, backgrounds: &BackgroundSource) -> Result<Self, AttackError> {
        render.validate()?;
        let sampler = SceneSampler::new(render);
        let mut index: HashMap<(u8, u64), usize> = HashMap::new();
        let mut meshes: Vec<PoolMesh> = Vec::new();
        let mut scenes = Vec::with_capacity(n);
        for i in 0..n {
            let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
            let scene = sampler.sample(s, 1..=1)?;
            let r = scene.vehicles[0].mesh;
            let key = (r.template as u8, r.seed);
            let mesh = match index.get(&key) {
                Some(&k) => k,
                None => {
                    let m = r.build();
                    let topology = build_topology_map(&m)?;
                    meshes.push(PoolMesh { mesh_ref: r, mesh: m, topology });
                    index.insert(key, meshes.len() - 1);
                    meshes.len() - 1
                }
            };
            let background = backgrounds.get(scene.background_id, render.image_size)?;
            scenes.push(PoolScene { scene, background, mesh });
        }
        Ok(Self { render, scenes, meshes })
    }

    /// Same scenes under another fidelity profile.
    pub fn with_render(mut self, render: RenderConfig) -> Result<Self, AttackError> {
        render.validate()?;
        if render.image_size != self.render.image_size {
            return Err(AttackError::Config("profile change must keep the image size".into()));
        }
        self.render = render;
        Ok(self)
    }

    pub fn annotations(&self, i: usize) -> Vec<Annotation> {
        let s = &self.scenes[i];
        let mesh = &self.meshes[s.mesh].mesh;
        s.scene
            .vehicles
            .iter()
            .enumerate()
            .map(|(id, v)| Annotation { id, center: vehicle_center_pixel(mesh, v, &s.scene.camera, &self.render) })
            .collect()
    }
}

/// Initial texture parameter for `flags`: the Fc/Lc palette comes from the
/// pool backgrounds, the Ma mask excludes glass and lights, and the masked-out
/// texels keep the factory paint (identical across paint seeds there).
pub fn initial_texture(cfg: &AttackConfig, pool: &ScenePool) -> Result<TextureParam, AttackError> {
    let flags = cfg.flags;
    let palette = if flags.color_restricted() {
        let bgs: Vec<RgbImage> = pool.scenes.iter().map(|s| s.background.clone()).collect();
        Some(palette_from_backgrounds(&bgs, cfg.n_colors)?)
    } else {
        None
    };
    let (mask, original) = if flags.ma { (Some(paint_mask()), Some(original_paint(0))) } else { (None, None) };
    Ok(TextureParam::init(flags, palette, mask, original, cfg.seed ^ 0x7E47)?)
}

/// Texture as evaluated: hard palette projection when color-restricted.
pub fn final_texture(param: &TextureParam, tau: f64) -> Result<TextureMap, AttackError> {
    Ok(if param.flags.color_restricted() { project_colors(param)? } else { compose_texture(param, tau)? })
}

/// Ensemble term of one detector: focal loss with an all-background target.
fn detector_loss(tape: &mut Tape, det: &DetectorSpec, weights: &[Var], image: Var) -> Result<Var, AttackError> {
    let z = det.logits_on_tape(tape, weights, image)?;
    let n = tape.value(z).len();
    Ok(focal_loss_on_tape(tape, z, Rc::new(vec![0.0; n]))?)
}

/// `sum_i lambda_i * mean_b F_i(image_b)` on the tape.
pub fn ensemble_loss_on_tape(
    tape: &mut Tape,
    images: &[Var],
    detectors: &[DetectorSpec],
    lambdas: &[f64],
) -> Result<Var, AttackError> {
    if detectors.len() != lambdas.len() || detectors.is_empty() || images.is_empty() {
        return Err(AttackError::Config("one lambda per detector and a non-empty batch required".into()));
    }
    let mut total: Option<Var> = None;
    for (det, &lambda) in detectors.iter().zip(lambdas) {
        let w = det.weight_vars(tape, false)?;
        for &img in images {
            let l = detector_loss(tape, det, &w, img)?;
            let l = tape.scale(l, lambda / images.len() as f64)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
    }
    Ok(total.expect("non-empty"))
}

/// Per-detector mean loss over `images`.
pub fn detector_losses(images: &[Tensor], detectors: &[DetectorSpec]) -> Result<Vec<f64>, AttackError> {
    detectors
        .iter()
        .map(|det| {
            let mut sum = 0.0;
            for img in images {
                let mut tape = Tape::new();
                let w = det.weight_vars(&mut tape, false)?;
                let x = tape.constant(img.clone())?;
                let l = detector_loss(&mut tape, det, &w, x)?;
                sum += tape.data(l)[0];
            }
            Ok(sum / images.len().max(1) as f64)
        })
        .collect()
}

pub fn ensemble_loss(images: &[Tensor], detectors: &[DetectorSpec], lambdas: &[f64]) -> Result<f64, AttackError> {
    if detectors.len() != lambdas.len() {
        return Err(AttackError::Config("one lambda per detector required".into()));
    }
    Ok(detector_losses(images, detectors)?.iter().zip(lambdas).map(|(l, w)| l * w).sum())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// `lambda_i = median(F) / F_i` so every weighted term is equal at the probe.
pub fn balance_from_losses(losses: &[f64]) -> Result<Vec<f64>, AttackError> {
    if losses.is_empty() || losses.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(AttackError::DegenerateLoss(losses.to_vec()));
    }
    let m = median(losses);
    Ok(losses.iter().map(|l| m / l).collect())
}

pub fn balance_lambdas(detectors: &[DetectorSpec], probe: &[Tensor]) -> Result<Vec<f64>, AttackError> {
    if detectors.is_empty() || probe.is_empty() {
        return Err(AttackError::Config("balancing needs detectors and a probe batch".into()));
    }
    balance_from_losses(&detector_losses(probe, detectors)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    T,
    S,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,epoch,phase,loss,grad_norm,clipped_norm\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{:?},{:.9e},{:.6e},{:.6e}\n",
            r.step, r.epoch, r.phase, r.loss, r.grad_norm, r.clipped_norm
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub texture: Option<TextureParam>,
    pub field: Option<DisplacementField>,
    pub lambdas: Vec<f64>,
    pub history: Vec<LossRecord>,
    /// One entry per optimization block, in order.
    pub phases: Vec<Phase>,
}

/// What a step renders and which latent it differentiates.
struct StepInputs<'a> {
    texture: Option<&'a TextureParam>,
    field: Option<&'a DisplacementField>,
    train: Phase,
}

struct StepGrads {
    loss: f64,
    /// rgb, or probs then palette
    texture: Vec<Vec<f64>>,
    field: Vec<f64>,
}

struct Runner<'a> {
    cfg: &'a AttackConfig,
    detectors: &'a [DetectorSpec],
    pool: &'a ScenePool,
    lambdas: Vec<f64>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    step: usize,
    history: Vec<LossRecord>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a AttackConfig, detectors: &'a [DetectorSpec], pool: &'a ScenePool) -> Result<Self, AttackError> {
        cfg.validate()?;
        if detectors.is_empty() {
            return Err(AttackError::Config("no detectors".into()));
        }
        if pool.scenes.is_empty() {
            return Err(AttackError::Config("empty scene pool".into()));
        }
        if pool.render.image_size != cfg.image_size {
            return Err(AttackError::Config(format!(
                "pool renders {} px, config expects {}",
                pool.render.image_size, cfg.image_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..pool.scenes.len()).collect();
        order.shuffle(&mut rng);
        Ok(Self { cfg, detectors, pool, lambdas: Vec::new(), rng, order, cursor: 0, epoch: 0, step: 0, history: Vec::new() })
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Differentiable frame of pool scene `i`.
    fn frame(
        &self,
        tape: &mut Tape,
        i: usize,
        texture: Option<Var>,
        field: Option<(Var, f64)>,
    ) -> Result<Var, AttackError> {
        let ps = &self.pool.scenes[i];
        let pm = &self.pool.meshes[ps.mesh];
        let placement = &ps.scene.vehicles[0];
        let tex = match texture {
            Some(t) => t,
            None => tape.constant(texture_tensor(&original_paint(placement.paint_seed))?)?,
        };
        let verts = match field {
            Some((latent, amount)) => displace_on_tape(tape, &pm.mesh, &pm.topology, latent, amount)?,
            None => tape.constant(vertex_tensor(&pm.mesh))?,
        };
        let inputs = [VehicleInput { mesh: &pm.mesh, vertices: verts, texture: tex, placement }];
        let lighting = ps.scene.effective_lighting(&self.pool.render);
        let raster = rasterize(tape, &inputs, &ps.scene.camera, &lighting, &self.pool.render)?;
        Ok(composite_on_tape(tape, &ps.background, raster.foreground, &raster.alpha, &self.pool.render)?)
    }

    fn gradients(&self, batch: &[usize], inp: &StepInputs<'_>, lambdas: &[f64]) -> Result<StepGrads, AttackError> {
        let mut tape = Tape::new();
        let (tex_var, tex_vars) = match inp.texture {
            Some(p) if inp.train == Phase::T => {
                let (t, v) = compose_on_tape(&mut tape, p, self.cfg.tau)?;
                (Some(t), Some(v))
            }
            Some(p) => (Some(tape.constant(texture_tensor(&compose_texture(p, self.cfg.tau)?)?)?), None),
            None => (None, None),
        };
        let field_var = match inp.field {
            Some(f) if inp.train == Phase::S => Some((tape.param(f.latent.clone())?, f.pm)),
            Some(f) => Some((tape.constant(f.latent.clone())?, f.pm)),
            None => None,
        };
        let frames =
            batch.iter().map(|&i| self.frame(&mut tape, i, tex_var, field_var)).collect::<Result<Vec<_>, _>>()?;
        let loss = ensemble_loss_on_tape(&mut tape, &frames, self.detectors, lambdas)?;
        let value = tape.data(loss)[0];
        let mut grads = tape.backward(loss)?;
        let texture = match tex_vars {
            Some(v) => {
                let palette = v.palette.filter(|_| inp.texture.is_some_and(|p| p.flags.lc));
                [v.rgb, v.probs, palette].into_iter().flatten().map(|x| grads.take(x)).collect()
            }
            None => Vec::new(),
        };
        let field = match field_var {
            Some((v, _)) if inp.train == Phase::S => grads.take(v),
            _ => Vec::new(),
        };
        Ok(StepGrads { loss: value, texture, field })
    }

    /// Balanced or configured lambdas at the initial latents.
    fn init_lambdas(&mut self, texture: Option<&TextureParam>, field: Option<&DisplacementField>) -> Result<(), AttackError> {
        if let Some(l) = &self.cfg.lambdas {
            if l.len() != self.detectors.len() {
                return Err(AttackError::Config(format!("{} lambdas for {} detectors", l.len(), self.detectors.len())));
            }
            self.lambdas = l.clone();
            return Ok(());
        }
        let probe: Vec<usize> = (0..self.cfg.batch_size.min(self.pool.scenes.len())).collect();
        let mut tape = Tape::new();
        let tex = match texture {
            Some(p) => Some(tape.constant(texture_tensor(&compose_texture(p, self.cfg.tau)?)?)?),
            None => None,
        };
        let fv = match field {
            Some(f) => Some((tape.constant(f.latent.clone())?, f.pm)),
            None => None,
        };
        let mut images = Vec::new();
        for &i in &probe {
            let v = self.frame(&mut tape, i, tex, fv)?;
            images.push(tape.value(v).clone());
        }
        self.lambdas = balance_lambdas(self.detectors, &images)?;
        Ok(())
    }

    fn record(&mut self, phase: Phase, loss: f64, grad_norm: f64, clipped: f64) {
        self.history.push(LossRecord { step: self.step, epoch: self.epoch, phase, loss, grad_norm, clipped_norm: clipped });
        self.step += 1;
    }

    fn texture_step(
        &mut self,
        param: &mut TextureParam,
        field: Option<&DisplacementField>,
        opt: &mut Optimizer,
    ) -> Result<f64, AttackError> {
        let batch = self.next_batch();
        let lambdas = self.lambdas.clone();
        let g = self.gradients(&batch, &StepInputs { texture: Some(param), field, train: Phase::T }, &lambdas)?;
        let mut grads = g.texture;
        let norm = clip_global_norm(&mut grads, CLIP_NORM);
        let clipped = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        if !g.loss.is_finite() || !norm.is_finite() {
            return Err(AttackError::Diverged {
                step: self.step,
                snapshot: Box::new(Snapshot { texture: Some(param.clone()), field: field.cloned() }),
            });
        }
        step_texture(param, opt, &grads)?;
        self.record(Phase::T, g.loss, norm, clipped);
        Ok(g.loss)
    }

    fn shape_step(
        &mut self,
        field: &mut DisplacementField,
        texture: Option<&TextureParam>,
        opt: &mut Optimizer,
    ) -> Result<f64, AttackError> {
        let batch = self.next_batch();
        let lambdas = self.lambdas.clone();
        let g = self.gradients(&batch, &StepInputs { texture, field: Some(field), train: Phase::S }, &lambdas)?;
        let mut grads = vec![g.field];
        let norm = clip_global_norm(&mut grads, CLIP_NORM);
        let clipped = grads[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        if !g.loss.is_finite() || !norm.is_finite() {
            return Err(AttackError::Diverged {
                step: self.step,
                snapshot: Box::new(Snapshot { texture: texture.cloned(), field: Some(field.clone()) }),
            });
        }
        opt.step(&mut [&mut field.latent], &grads)?;
        *field = symmetrize(field);
        self.record(Phase::S, g.loss, norm, clipped);
        Ok(g.loss)
    }
}

fn texture_slots(param: &TextureParam) -> Vec<Tensor> {
    let mut v = Vec::new();
    if let Some(t) = &param.latent_rgb {
        v.push(t.clone());
    }
    if let Some(t) = &param.latent_probs {
        v.push(t.clone());
    }
    if param.flags.lc {
        v.push(param.palette.as_ref().expect("validated").to_tensor());
    }
    v
}

fn texture_optimizer(cfg: &AttackConfig, param: &TextureParam) -> Result<Optimizer, AttackError> {
    let slots = texture_slots(param);
    Ok(Optimizer::new(cfg.optimizer, cfg.learning_rate, &slots.iter().collect::<Vec<_>>())?)
}

/// Applies one optimizer step to the texture latents, then clamps them into
/// their domains.
fn step_texture(param: &mut TextureParam, opt: &mut Optimizer, grads: &[Vec<f64>]) -> Result<(), AttackError> {
    let mut slots = texture_slots(param);
    {
        let mut refs: Vec<&mut Tensor> = slots.iter_mut().collect();
        opt.step(&mut refs, grads)?;
    }
    let mut it = slots.into_iter();
    if param.latent_rgb.is_some() {
        param.latent_rgb = it.next();
    }
    if param.latent_probs.is_some() {
        param.latent_probs = it.next();
    }
    if param.flags.lc {
        let mut pal = it.next().expect("palette slot");
        pal.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        // a collapsed pair keeps the previous palette
        if let Ok(p) = Palette::from_tensor(&pal) {
            param.palette = Some(p);
        }
    }
    param.clamp_latents();
    Ok(())
}

fn shape_optimizer(cfg: &AttackConfig, field: &DisplacementField) -> Result<Optimizer, AttackError> {
    Ok(Optimizer::new(cfg.optimizer, cfg.shape_learning_rate, &[&field.latent])?)
}

fn run_texture(runner: &mut Runner<'_>, param: &mut TextureParam, field: Option<&DisplacementField>) -> Result<(), AttackError> {
    let mut opt = texture_optimizer(runner.cfg, param)?;
    let per_epoch = runner.cfg.steps_per_epoch();
    for epoch in 0..runner.cfg.epochs {
        runner.epoch = epoch;
        for _ in 0..per_epoch {
            runner.texture_step(param, field, &mut opt)?;
        }
        if param.flags.color_restricted() {
            *param = renormalize_probs(param);
        }
    }
    Ok(())
}

fn run_shape(runner: &mut Runner<'_>, field: &mut DisplacementField, texture: Option<&TextureParam>) -> Result<(), AttackError> {
    let mut opt = shape_optimizer(runner.cfg, field)?;
    let per_epoch = runner.cfg.steps_per_epoch();
    for epoch in 0..runner.cfg.epochs {
        runner.epoch = epoch;
        for _ in 0..per_epoch {
            runner.shape_step(field, texture, &mut opt)?;
        }
    }
    Ok(())
}

pub fn attack_texture(cfg: &AttackConfig, detectors: &[DetectorSpec], pool: &ScenePool) -> Result<AttackOutcome, AttackError> {
    if cfg.mode != AttackMode::Texture {
        return Err(AttackError::Config(format!("attack_texture called with mode {}", cfg.mode)));
    }
    let mut runner = Runner::new(cfg, detectors, pool)?;
    let mut param = initial_texture(cfg, pool)?;
    runner.init_lambdas(Some(&param), None)?;
    run_texture(&mut runner, &mut param, None)?;
    Ok(AttackOutcome {
        texture: Some(param),
        field: None,
        lambdas: runner.lambdas,
        history: runner.history,
        phases: vec![Phase::T],
    })
}

/// Shape attack with a fixed appearance: `texture` universal, or each
/// vehicle's factory paint when `None`.
pub fn attack_shape(
    cfg: &AttackConfig,
    detectors: &[DetectorSpec],
    pool: &ScenePool,
    texture: Option<&TextureParam>,
) -> Result<AttackOutcome, AttackError> {
    if cfg.mode != AttackMode::Shape {
        return Err(AttackError::Config(format!("attack_shape called with mode {}", cfg.mode)));
    }
    let mut runner = Runner::new(cfg, detectors, pool)?;
    let mut field = DisplacementField::undeformed(cfg.pm)?;
    runner.init_lambdas(texture, Some(&field))?;
    run_shape(&mut runner, &mut field, texture)?;
    Ok(AttackOutcome {
        texture: texture.cloned(),
        field: Some(field),
        lambdas: runner.lambdas,
        history: runner.history,
        phases: vec![Phase::S],
    })
}

/// Shape stage of a sequential combined attack on an already optimized
/// texture.
pub fn combined_after_texture(
    cfg: &AttackConfig,
    detectors: &[DetectorSpec],
    pool: &ScenePool,
    texture_stage: &AttackOutcome,
) -> Result<AttackOutcome, AttackError> {
    let param = texture_stage.texture.as_ref().ok_or_else(|| AttackError::Config("texture stage has no texture".into()))?;
    let shape_cfg = AttackConfig { mode: AttackMode::Shape, ..cfg.clone() };
    let mut runner = Runner::new(&shape_cfg, detectors, pool)?;
    runner.lambdas = texture_stage.lambdas.clone();
    runner.step = texture_stage.history.len();
    let mut field = DisplacementField::undeformed(cfg.pm)?;
    run_shape(&mut runner, &mut field, Some(param))?;
    let mut history = texture_stage.history.clone();
    history.extend(runner.history);
    Ok(AttackOutcome {
        texture: Some(param.clone()),
        field: Some(field),
        lambdas: texture_stage.lambdas.clone(),
        history,
        phases: vec![Phase::T, Phase::S],
    })
}

pub fn attack_combined_sequential(
    cfg: &AttackConfig,
    detectors: &[DetectorSpec],
    pool: &ScenePool,
) -> Result<AttackOutcome, AttackError> {
    if cfg.mode != AttackMode::CombinedSeq {
        return Err(AttackError::Config(format!("sequential attack called with mode {}", cfg.mode)));
    }
    cfg.validate()?;
    let tex_cfg = AttackConfig { mode: AttackMode::Texture, ..cfg.clone() };
    let stage = attack_texture(&tex_cfg, detectors, pool)?;
    combined_after_texture(cfg, detectors, pool, &stage)
}

/// Alternates texture and shape blocks of `n_pll` steps within the budget of
/// the sequential attack, stopping early once [`PLATEAU_BLOCKS`] consecutive
/// blocks improve the mean loss by less than [`PLATEAU_TOL`] relative.
pub fn attack_combined_parallel(
    cfg: &AttackConfig,
    detectors: &[DetectorSpec],
    pool: &ScenePool,
) -> Result<AttackOutcome, AttackError> {
    if cfg.mode != AttackMode::CombinedPar {
        return Err(AttackError::Config(format!("parallel attack called with mode {}", cfg.mode)));
    }
    let mut runner = Runner::new(cfg, detectors, pool)?;
    let mut param = initial_texture(cfg, pool)?;
    let mut field = DisplacementField::undeformed(cfg.pm)?;
    runner.init_lambdas(Some(&param), None)?;
    let mut topt = texture_optimizer(cfg, &param)?;
    let mut sopt = shape_optimizer(cfg, &field)?;
    let per_epoch = cfg.steps_per_epoch();
    let budget = 2 * cfg.epochs * per_epoch;
    let mut phases = Vec::new();
    let mut phase = Phase::T;
    let mut last_mean: Option<f64> = None;
    let mut flat = 0;
    let mut done = 0;
    while done < budget {
        let n = cfg.n_pll.min(budget - done);
        let mut sum = 0.0;
        for _ in 0..n {
            runner.epoch = done / (2 * per_epoch).max(1);
            sum += match phase {
                Phase::T => runner.texture_step(&mut param, Some(&field), &mut topt)?,
                Phase::S => runner.shape_step(&mut field, Some(&param), &mut sopt)?,
            };
            done += 1;
            if phase == Phase::T && param.flags.color_restricted() && done % per_epoch == 0 {
                param = renormalize_probs(&param);
            }
        }
        phases.push(phase);
        let mean = sum / n as f64;
        if let Some(prev) = last_mean {
            let rel = (prev - mean) / prev.abs().max(f64::MIN_POSITIVE);
            flat = if rel < PLATEAU_TOL { flat + 1 } else { 0 };
            if flat >= PLATEAU_BLOCKS {
                break;
            }
        }
        last_mean = Some(mean);
        phase = if phase == Phase::T { Phase::S } else { Phase::T };
    }
    Ok(AttackOutcome { texture: Some(param), field: Some(field), lambdas: runner.lambdas, history: runner.history, phases })
}

/// Dispatches on `cfg.mode`.
pub fn run_attack(cfg: &AttackConfig, detectors: &[DetectorSpec], pool: &ScenePool) -> Result<AttackOutcome, AttackError> {
    match cfg.mode {
        AttackMode::Texture => attack_texture(cfg, detectors, pool),
        AttackMode::Shape => attack_shape(cfg, detectors, pool, None),
        AttackMode::CombinedSeq => attack_combined_sequential(cfg, detectors, pool),
        AttackMode::CombinedPar => attack_combined_parallel(cfg, detectors, pool),
    }
}

/// Final appearance change applied to every vehicle.
#[derive(Clone, Debug, Default)]
pub struct Camouflage {
    /// Universal texture; `None` keeps each vehicle's factory paint.
    pub texture: Option<TextureMap>,
    pub field: Option<DisplacementField>,
}

impl Camouflage {
    pub fn from_outcome(out: &AttackOutcome, tau: f64) -> Result<Self, AttackError> {
        let texture = match &out.texture {
            Some(p) => Some(final_texture(p, tau)?),
            None => None,
        };
        Ok(Self { texture, field: out.field.clone() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEval {
    pub detector: String,
    pub outcome: MatchedEvalResult,
    /// `None` when no vehicle was detected in the originals.
    pub rates: Option<AttackRates>,
    pub ap_or: f64,
    pub ap_adv: f64,
}

/// Matched original/adversarial renders of every pool scene, scored by each
/// calibrated detector.
pub fn evaluate_camouflage(
    camo: &Camouflage,
    detectors: &[DetectorSpec],
    pool: &ScenePool,
    radius: f64,
) -> Result<Vec<DetectorEval>, AttackError> {
    let mut originals = Vec::with_capacity(pool.scenes.len());
    let mut adversarial = Vec::with_capacity(pool.scenes.len());
    let mut gts = Vec::with_capacity(pool.scenes.len());
    for (i, ps) in pool.scenes.iter().enumerate() {
        let pm = &pool.meshes[ps.mesh];
        let paint = original_paint(ps.scene.vehicles[0].paint_seed);
        let deformed = match &camo.field {
            Some(f) => Some(apply_displacement(&pm.mesh, f, &pm.topology)?),
            None => None,
        };
        let orig = [VehicleAppearance { mesh: &pm.mesh, texture: &paint }];
        let adv = [VehicleAppearance {
            mesh: deformed.as_ref().unwrap_or(&pm.mesh),
            texture: camo.texture.as_ref().unwrap_or(&paint),
        }];
        originals.push(image_to_chw(&render_with(&ps.scene, &ps.background, &orig, &pool.render)?));
        adversarial.push(image_to_chw(&render_with(&ps.scene, &ps.background, &adv, &pool.render)?));
        gts.push(pool.annotations(i));
    }
    let centers: Vec<Vec<[f64; 2]>> = gts.iter().map(|g| g.iter().map(|a| a.center).collect()).collect();
    detectors
        .iter()
        .map(|det| {
            let threshold = det.threshold.ok_or(DetectError::Uncalibrated)?;
            let peaks = |imgs: &[Tensor]| -> Result<Vec<DetectionSet>, AttackError> {
                imgs.iter().map(|x| Ok(det.heatmap(x)?.peaks())).collect()
            };
            let (po, pa) = (peaks(&originals)?, peaks(&adversarial)?);
            let det_or: Vec<_> = po.iter().map(|p| p.above(threshold)).collect();
            let det_adv: Vec<_> = pa.iter().map(|p| p.above(threshold)).collect();
            let outcome = match_outcomes(&gts, &det_or, &gts, &det_adv, radius)
                .map_err(|e| AttackError::Config(e.to_string()))?;
            Ok(DetectorEval {
                detector: det.arch.to_string(),
                outcome,
                rates: easr(&outcome).ok(),
                ap_or: average_precision(&po, &centers, radius)?,
                ap_adv: average_precision(&pa, &centers, radius)?,
            })
        })
        .collect()
}

/// Mean EASR over detectors where it is defined.
pub fn mean_easr(evals: &[DetectorEval]) -> Option<f64> {
    let v: Vec<f64> = evals.iter().filter_map(|e| e.rates.map(|r| r.easr)).collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub pm: f64,
    pub pr: f64,
    pub easr: Vec<Option<f64>>,
    pub easr_mean: Option<f64>,
    pub p1: f64,
}

impl SweepPoint {
    pub fn new(pm: f64, easr: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = easr.iter().flatten().copied().collect();
        let easr_mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let pr = 1.0 - pm;
        Self { pm, pr, p1: p1(easr_mean.unwrap_or(0.0), pr), easr, easr_mean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub optimal_index: usize,
}

impl SweepResult {
    /// Selects the max-P1 point; ties go to the higher Pr.
    pub fn from_points(points: Vec<SweepPoint>) -> Result<Self, AttackError> {
        if points.is_empty() {
            return Err(AttackError::Config("empty pm grid".into()));
        }
        let mut best = 0;
        for (i, p) in points.iter().enumerate().skip(1) {
            let b = &points[best];
            if p.p1 > b.p1 || (p.p1 == b.p1 && p.pr > b.pr) {
                best = i;
            }
        }
        Ok(Self { points, optimal_index: best })
    }

    pub fn optimal(&self) -> &SweepPoint {
        &self.points[self.optimal_index]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pm,pr,easr_mean,p1,optimal\n");
        for (i, p) in self.points.iter().enumerate() {
            let e = p.easr_mean.map_or_else(|| "N/A".to_string(), |v| format!("{v:.6}"));
            s.push_str(&format!("{:.4},{:.4},{e},{:.6},{}\n", p.pm, p.pr, p.p1, i == self.optimal_index));
        }
        s
    }
}

/// Per-point outcome of a sweep, kept for reporting.
pub struct SweepRun {
    pub result: SweepResult,
    pub outcomes: Vec<AttackOutcome>,
    pub evals: Vec<Vec<DetectorEval>>,
}

/// Runs shape or combined attacks at every `pm` and scores them on `eval`.
/// The texture stage of a sequential combined attack does not depend on
/// `pm`, so it is optimized once and shared.
pub fn sweep_pm(
    cfg: &AttackConfig,
    detectors: &[DetectorSpec],
    pool: &ScenePool,
    eval: &ScenePool,
    grid: &[f64],
    radius: f64,
) -> Result<SweepRun, AttackError> {
    if grid.is_empty() {
        return Err(AttackError::Config("empty pm grid".into()));
    }
    if grid.iter().any(|p| !(0.0..=1.0).contains(p)) || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(AttackError::Config(format!("pm grid {grid:?} must be ascending within [0,1]")));
    }
    if cfg.mode == AttackMode::Texture {
        return Err(AttackError::Config("pm sweeps need a shape or combined mode".into()));
    }
    let stage = if cfg.mode == AttackMode::CombinedSeq {
        Some(attack_texture(&AttackConfig { mode: AttackMode::Texture, ..cfg.clone() }, detectors, pool)?)
    } else {
        None
    };
    let mut points = Vec::with_capacity(grid.len());
    let mut outcomes = Vec::with_capacity(grid.len());
    let mut evals = Vec::with_capacity(grid.len());
    for &pm in grid {
        let c = AttackConfig { pm, ..cfg.clone() };
        let out = match &stage {
            Some(s) => combined_after_texture(&c, detectors, pool, s)?,
            None => run_attack(&c, detectors, pool)?,
        };
        let ev = evaluate_camouflage(&Camouflage::from_outcome(&out, cfg.tau)?, detectors, eval, radius)?;
        points.push(SweepPoint::new(pm, ev.iter().map(|e| e.rates.map(|r| r.easr)).collect()));
        outcomes.push(out);
        evals.push(ev);
    }
    Ok(SweepRun { result: SweepResult::from_points(points)?, outcomes, evals })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_balancing_examples() {
        assert_eq!(balance_from_losses(&[2.0, 4.0, 8.0]).unwrap(), vec![2.0, 1.0, 0.5]);
        assert_eq!(balance_from_losses(&[3.0]).unwrap(), vec![1.0]);
        assert!(matches!(balance_from_losses(&[1.0, 0.0]), Err(AttackError::DegenerateLoss(_))));
        let l = [0.3, 7.0, 1.1, 2.5];
        let lam = balance_from_losses(&l).unwrap();
        let w: Vec<f64> = l.iter().zip(&lam).map(|(a, b)| a * b).collect();
        let (lo, hi) = w.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert!((hi / lo - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_round_trips_through_kv() {
        let c = AttackConfig {
            mode: AttackMode::CombinedPar,
            flags: "PixFc".parse().unwrap(),
            lambdas: Some(vec![1.0, 0.5, 2.0]),
            pm: 0.4,
            seed: 99,
            ..Default::default()
        };
        assert_eq!(AttackConfig::from_kv_text(&c.to_kv_text()).unwrap(), c);
        let partial = AttackConfig::from_kv_text("# comment\nmode = shape\n pm=0.6 \n").unwrap();
        assert_eq!((partial.mode, partial.pm), (AttackMode::Shape, 0.6));
        assert!(AttackConfig::from_kv_text("bogus = 1").is_err());
        assert!(AttackConfig::from_kv_text("pm").is_err());
    }

    #[test]
    fn config_invariants() {
        let bad = |c: AttackConfig| c.validate().is_err();
        assert!(bad(AttackConfig { pm: 1.5, ..Default::default() }));
        assert!(bad(AttackConfig { n_pll: 0, ..Default::default() }));
        assert!(bad(AttackConfig { scenes_per_epoch: 0, ..Default::default() }));
        assert!(bad(AttackConfig { lambdas: Some(vec![1.0, 0.0]), ..Default::default() }));
        assert!(bad(AttackConfig { mode: AttackMode::CombinedSeq, flags: "Ma".parse().unwrap(), ..Default::default() }));
        assert!(AttackConfig::default().validate().is_ok());
    }

    #[test]
    fn sweep_selection_rule() {
        let pts = vec![
            SweepPoint::new(0.0, vec![Some(0.0)]),
            SweepPoint::new(0.2, vec![Some(0.5)]),
            SweepPoint::new(0.4, vec![Some(0.6)]),
        ];
        for p in &pts {
            assert_eq!(p.pr, 1.0 - p.pm);
        }
        assert_eq!(pts[0].p1, 0.0);
        let r = SweepResult::from_points(pts).unwrap();
        let best = r.points.iter().map(|p| p.p1).fold(f64::MIN, f64::max);
        assert_eq!(r.optimal().p1, best);
        assert_eq!(r.optimal_index, 1);
        // equal P1 prefers the higher Pr
        let tie = SweepResult::from_points(vec![
            SweepPoint { pm: 0.2, pr: 0.8, easr: vec![], easr_mean: None, p1: 0.5 },
            SweepPoint { pm: 0.4, pr: 0.6, easr: vec![], easr_mean: None, p1: 0.5 },
        ])
        .unwrap();
        assert_eq!(tie.optimal_index, 0);
        assert!(SweepResult::from_points(vec![]).is_err());
    }
}
