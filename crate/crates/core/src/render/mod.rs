//! Near-nadir scene rendering: scene sampling, a z-buffered rasterizer that
//! carries gradients to textures and vertices, and the compositing pipeline
//! (supersampled blend, average-pool anti-aliasing, Gaussian edge blur).

mod background;
mod dataset;
mod raster;

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camotex::{original_paint, TextureMap};
use crate::diffmath::{blur_kernel_size, Tape, Tensor, TensorError, Var};
use crate::image::{ImageError, RgbImage};
use crate::meshgeom::{generate_vehicle_mesh, Mesh, MeshError, VehicleTemplate};

pub use background::{procedural_background, BackgroundSource};
pub use dataset::{
    generate_dataset, generate_samples, load_manifest, write_dataset, Annotation, DatasetSpec,
    ManifestRecord, Sample, MANIFEST,
};
pub use raster::{rasterize, RasterOutput, VehicleInput};

pub const GSD: f64 = 0.125;
pub const MAX_ELEVATION_DEVIATION: f64 = 20.0 * std::f64::consts::PI / 180.0;
/// Clearance radius used for placement and footprint checks, meters.
pub const VEHICLE_RADIUS: f64 = 2.75;
const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("contract error: {0}")]
    Contract(String),
    #[error("placement failed: {0}")]
    Placement(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FidelityProfile {
    Train,
    Transfer,
}

impl std::str::FromStr for FidelityProfile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "transfer" => Ok(Self::Transfer),
            _ => Err(format!("unknown profile '{s}' (train|transfer)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub image_size: usize,
    pub supersample: usize,
    pub blur_sigma: f64,
    pub profile: FidelityProfile,
    pub gsd: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self::train(384)
    }
}

impl RenderConfig {
    pub fn train(image_size: usize) -> Self {
        Self { image_size, supersample: 4, blur_sigma: 2.4, profile: FidelityProfile::Train, gsd: GSD }
    }

    /// Held-out appearance settings used only for transfer evaluation.
    pub fn transfer(image_size: usize) -> Self {
        Self { image_size, supersample: 2, blur_sigma: 3.0, profile: FidelityProfile::Transfer, gsd: GSD }
    }

    pub fn for_profile(profile: FidelityProfile, image_size: usize) -> Self {
        match profile {
            FidelityProfile::Train => Self::train(image_size),
            FidelityProfile::Transfer => Self::transfer(image_size),
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.image_size == 0 || self.supersample == 0 {
            return Err(RenderError::Contract("image size and supersample factor must be >= 1".into()));
        }
        if !(self.blur_sigma > 0.0) || !(self.gsd > 0.0) {
            return Err(RenderError::Contract("blur sigma and gsd must be positive".into()));
        }
        Ok(())
    }

    pub fn blur_kernel_size(&self) -> usize {
        blur_kernel_size(self.blur_sigma)
    }

    pub fn fine_size(&self) -> usize {
        self.image_size * self.supersample
    }

    /// Ground extent of the image, meters.
    pub fn extent(&self) -> f64 {
        self.image_size as f64 * self.gsd
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshRef {
    pub template: VehicleTemplate,
    pub seed: u64,
}

impl MeshRef {
    pub fn build(&self) -> Mesh {
        generate_vehicle_mesh(self.seed, self.template)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehiclePlacement {
    pub mesh: MeshRef,
    /// Seed of the factory paint job.
    pub paint_seed: u64,
    /// Meters from the image centre; `y` points up the image.
    pub position: [f64; 2],
    pub yaw: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub azimuth: f64,
    pub elevation_deviation: f64,
    pub gsd: f64,
}

impl Camera {
    pub fn nadir() -> Self {
        Self { azimuth: 0.0, elevation_deviation: 0.0, gsd: GSD }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub sun_azimuth: f64,
    pub sun_elevation: f64,
    pub ambient: f64,
}

impl Lighting {
    pub fn sun(&self) -> [f64; 3] {
        let (se, ce) = self.sun_elevation.sin_cos();
        let (sa, ca) = self.sun_azimuth.sin_cos();
        [ce * ca, ce * sa, se]
    }

    /// Deterministic offsets applied under the transfer profile.
    pub fn jittered(&self) -> Lighting {
        Lighting {
            sun_azimuth: self.sun_azimuth + 0.6,
            sun_elevation: (self.sun_elevation - 0.2).max(0.35),
            ambient: (self.ambient * 0.85 + 0.02).clamp(0.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Seed of the procedural background, or an index into a tile set.
    pub background_id: u64,
    pub vehicles: Vec<VehiclePlacement>,
    pub camera: Camera,
    pub lighting: Lighting,
}

impl SceneSpec {
    pub fn validate(&self, config: &RenderConfig) -> Result<(), RenderError> {
        if self.camera.elevation_deviation > MAX_ELEVATION_DEVIATION + 1e-12 {
            return Err(RenderError::Contract(format!(
                "elevation deviation {} exceeds 20 degrees",
                self.camera.elevation_deviation
            )));
        }
        let half = config.extent() / 2.0;
        for (i, v) in self.vehicles.iter().enumerate() {
            if v.position.iter().any(|p| p.abs() > half) {
                return Err(RenderError::Contract(format!("vehicle {i} outside the image footprint")));
            }
            for w in &self.vehicles[..i] {
                let d = (v.position[0] - w.position[0]).hypot(v.position[1] - w.position[1]);
                if d < 2.0 * VEHICLE_RADIUS {
                    return Err(RenderError::Contract(format!("vehicle {i} overlaps another")));
                }
            }
        }
        Ok(())
    }

    pub fn effective_lighting(&self, config: &RenderConfig) -> Lighting {
        match config.profile {
            FidelityProfile::Train => self.lighting,
            FidelityProfile::Transfer => self.lighting.jittered(),
        }
    }
}

/// Draws scenes for a fixed image footprint.
#[derive(Clone, Debug)]
pub struct SceneSampler {
    pub config: RenderConfig,
    /// Number of distinct backgrounds to draw `background_id` from; `None`
    /// draws a fresh procedural seed per scene.
    pub n_backgrounds: Option<u64>,
    pub mesh_seeds: u64,
    pub paint_seeds: u64,
}

impl SceneSampler {
    pub fn new(config: RenderConfig) -> Self {
        Self { config, n_backgrounds: None, mesh_seeds: 64, paint_seeds: 256 }
    }

    /// Vehicle count that random placement fits comfortably into the frame.
    pub fn capacity(&self) -> usize {
        let side = self.config.extent() - 2.0 * VEHICLE_RADIUS;
        if side <= 0.0 {
            return 0;
        }
        let per_row = (side / (3.0 * VEHICLE_RADIUS)).floor() as usize + 1;
        per_row * per_row
    }

    pub fn sample(&self, seed: u64, n_vehicles: RangeInclusive<usize>) -> Result<SceneSpec, RenderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(n_vehicles);
        let camera = sample_camera(&mut rng, self.config.gsd);
        let lighting = Lighting {
            sun_azimuth: rng.gen_range(0.0..std::f64::consts::TAU),
            sun_elevation: rng.gen_range(0.55..1.35),
            ambient: rng.gen_range(0.35..0.6),
        };
        let background_id = match self.n_backgrounds {
            Some(k) => rng.gen_range(0..k.max(1)),
            None => rng.gen(),
        };
        let half = self.config.extent() / 2.0 - VEHICLE_RADIUS;
        if half <= 0.0 && n > 0 {
            return Err(RenderError::Placement("image footprint smaller than a vehicle".into()));
        }
        let mut vehicles: Vec<VehiclePlacement> = Vec::with_capacity(n);
        let mut rejections = 0;
        while vehicles.len() < n {
            let position = [rng.gen_range(-half..=half), rng.gen_range(-half..=half)];
            let clear = vehicles.iter().all(|w| {
                (position[0] - w.position[0]).hypot(position[1] - w.position[1]) >= 2.0 * VEHICLE_RADIUS
            });
            if !clear {
                rejections += 1;
                if rejections >= MAX_REJECTIONS {
                    return Err(RenderError::Placement(format!(
                        "placed {} of {n} vehicles after {MAX_REJECTIONS} rejections",
                        vehicles.len()
                    )));
                }
                continue;
            }
            let template = VehicleTemplate::ALL[rng.gen_range(0..3)];
            vehicles.push(VehiclePlacement {
                mesh: MeshRef { template, seed: rng.gen_range(0..self.mesh_seeds.max(1)) },
                paint_seed: rng.gen_range(0..self.paint_seeds.max(1)),
                position,
                yaw: rng.gen_range(0.0..std::f64::consts::TAU),
            });
        }
        Ok(SceneSpec { background_id, vehicles, camera, lighting })
    }
}

/// Uniform point on the square `[-t, t]^2` lifted onto the unit hemisphere;
/// `t` is chosen so that the square's corners sit at the maximum deviation.
fn sample_camera(rng: &mut ChaCha8Rng, gsd: f64) -> Camera {
    let t = MAX_ELEVATION_DEVIATION.tan() / std::f64::consts::SQRT_2;
    let a: f64 = rng.gen_range(-t..=t);
    let b: f64 = rng.gen_range(-t..=t);
    Camera { azimuth: b.atan2(a), elevation_deviation: a.hypot(b).atan(), gsd }
}

/// Oblique parallel projection onto the supersampled pixel grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Projector {
    inv_gsd: f64,
    half: f64,
    kx: f64,
    ky: f64,
    toward_camera: [f64; 3],
}

impl Projector {
    pub(crate) fn new(camera: &Camera, config: &RenderConfig) -> Self {
        let tan = camera.elevation_deviation.tan();
        let (sa, ca) = camera.azimuth.sin_cos();
        let (st, ct) = camera.elevation_deviation.sin_cos();
        Self {
            inv_gsd: config.supersample as f64 / camera.gsd,
            half: config.fine_size() as f64 / 2.0,
            kx: -tan * ca,
            ky: -tan * sa,
            toward_camera: [st * ca, st * sa, ct],
        }
    }

    /// `(col, row)` in supersampled pixels.
    pub(crate) fn to_pixel(&self, w: [f64; 3]) -> [f64; 2] {
        [
            (w[0] + w[2] * self.kx) * self.inv_gsd + self.half,
            self.half - (w[1] + w[2] * self.ky) * self.inv_gsd,
        ]
    }

    /// Partial derivatives of `(col, row)` with respect to world coordinates.
    pub(crate) fn jacobian(&self) -> [[f64; 3]; 2] {
        [
            [self.inv_gsd, 0.0, self.kx * self.inv_gsd],
            [0.0, -self.inv_gsd, -self.ky * self.inv_gsd],
        ]
    }

    pub(crate) fn nearness(&self, w: [f64; 3]) -> f64 {
        w[0] * self.toward_camera[0] + w[1] * self.toward_camera[1] + w[2] * self.toward_camera[2]
    }
}

pub(crate) fn rotation(yaw: f64) -> [[f64; 3]; 3] {
    let (s, c) = yaw.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub(crate) fn model_to_world(v: [f64; 3], rot: &[[f64; 3]; 3], pos: [f64; 2]) -> [f64; 3] {
    [
        rot[0][0] * v[0] + rot[0][1] * v[1] + pos[0],
        rot[1][0] * v[0] + rot[1][1] * v[1] + pos[1],
        v[2],
    ]
}

/// Centre pixel `(x, y)` of a vehicle in final-resolution image coordinates.
pub fn vehicle_center_pixel(mesh: &Mesh, placement: &VehiclePlacement, camera: &Camera, config: &RenderConfig) -> [f64; 2] {
    let rot = rotation(placement.yaw);
    let c = mesh.centroid();
    let w = model_to_world(c, &rot, placement.position);
    let p = Projector::new(camera, config).to_pixel(w);
    let s = config.supersample as f64;
    [p[0] / s, p[1] / s]
}

pub fn image_to_chw(img: &RgbImage) -> Tensor {
    let (h, w) = (img.height, img.width);
    let mut out = vec![0.0; 3 * h * w];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = px[c];
        }
    }
    Tensor::new(&[3, h, w], out).expect("3 x h x w")
}

pub fn chw_to_image(data: &[f64], h: usize, w: usize) -> Result<RgbImage, RenderError> {
    if data.len() != 3 * h * w {
        return Err(RenderError::Contract(format!("{} values for a 3x{h}x{w} image", data.len())));
    }
    let mut out = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            out[3 * i + c] = data[c * h * w + i];
        }
    }
    Ok(RgbImage::new(w, h, out)?)
}

/// Records `bg + blur(avgpool(alpha * (fg - up(bg))))`, clamped to `[0, 1]`.
///
/// `fg` is a `[3, Hs, Ws]` foreground, so the blend
/// `bg*(1-alpha) + fg*alpha` is formed at supersampled resolution; pooling it
/// back to `bg`'s size anti-aliases, and the blur acts only on the difference
/// to the background.
pub fn composite_on_tape(
    tape: &mut Tape,
    bg: &RgbImage,
    fg: Var,
    alpha: &[f64],
    config: &RenderConfig,
) -> Result<Var, RenderError> {
    config.validate()?;
    let (h, w, s) = (bg.height, bg.width, config.supersample);
    if tape.shape(fg) != [3, h * s, w * s] || alpha.len() != h * s * w * s {
        return Err(RenderError::Contract(format!(
            "foreground {:?} / alpha {} do not match a {h}x{w} background at factor {s}",
            tape.shape(fg),
            alpha.len()
        )));
    }
    let bg_chw = image_to_chw(bg);
    let bg_up = crate::diffmath::kernels::upsample_chw(bg_chw.data(), 3, h, w, s);
    let plane = h * s * w * s;
    let offset: Vec<f64> = bg_up.iter().enumerate().map(|(i, b)| -alpha[i % plane] * b).collect();
    let alpha3: Vec<f64> = (0..3 * plane).map(|i| alpha[i % plane]).collect();
    let covered = tape.mul_const(fg, std::rc::Rc::new(alpha3))?;
    let diff = tape.add_const(covered, &offset)?;
    let pooled = if s > 1 { tape.avg_pool(diff, s)? } else { diff };
    let blurred = tape.gaussian_blur(pooled, config.blur_sigma)?;
    let out = tape.add_const(blurred, bg_chw.data())?;
    Ok(tape.clamp(out, 0.0, 1.0)?)
}

/// Non-differentiable compositing of a `[3, Hs, Ws]` foreground.
pub fn composite(bg: &RgbImage, fg: &Tensor, alpha: &[f64], config: &RenderConfig) -> Result<RgbImage, RenderError> {
    let mut tape = Tape::new();
    let f = tape.constant(fg.clone())?;
    let out = composite_on_tape(&mut tape, bg, f, alpha, config)?;
    chw_to_image(tape.data(out), bg.height, bg.width)
}

/// Resolved appearance of one scene vehicle.
pub struct VehicleAppearance<'a> {
    pub mesh: &'a Mesh,
    pub texture: &'a TextureMap,
}

/// Renders `scene` with explicit meshes and textures per vehicle.
pub fn render_with(
    scene: &SceneSpec,
    background: &RgbImage,
    vehicles: &[VehicleAppearance<'_>],
    config: &RenderConfig,
) -> Result<RgbImage, RenderError> {
    if vehicles.len() != scene.vehicles.len() {
        return Err(RenderError::Contract("one appearance per scene vehicle required".into()));
    }
    let mut tape = Tape::new();
    let mut inputs = Vec::with_capacity(vehicles.len());
    for (app, placement) in vehicles.iter().zip(&scene.vehicles) {
        let texture = tape.constant(texture_tensor(app.texture)?)?;
        let verts = tape.constant(vertex_tensor(app.mesh))?;
        inputs.push(VehicleInput { mesh: app.mesh, vertices: verts, texture, placement });
    }
    let raster = rasterize(&mut tape, &inputs, &scene.camera, &scene.effective_lighting(config), config)?;
    let out = composite_on_tape(&mut tape, background, raster.foreground, &raster.alpha, config)?;
    chw_to_image(tape.data(out), config.image_size, config.image_size)
}

/// Renders a scene from its own references (procedural meshes and paints).
pub fn render_scene(scene: &SceneSpec, backgrounds: &BackgroundSource, config: &RenderConfig) -> Result<RgbImage, RenderError> {
    render_scene_painted(scene, backgrounds, config, original_paint)
}

/// As [`render_scene`] with `paint` mapping each vehicle's paint seed to its
/// texture.
pub fn render_scene_painted(
    scene: &SceneSpec,
    backgrounds: &BackgroundSource,
    config: &RenderConfig,
    paint: impl Fn(u64) -> TextureMap,
) -> Result<RgbImage, RenderError> {
    let bg = backgrounds.get(scene.background_id, config.image_size)?;
    let meshes: Vec<Mesh> = scene.vehicles.iter().map(|v| v.mesh.build()).collect();
    let textures: Vec<TextureMap> = scene.vehicles.iter().map(|v| paint(v.paint_seed)).collect();
    let apps: Vec<VehicleAppearance> =
        meshes.iter().zip(&textures).map(|(mesh, texture)| VehicleAppearance { mesh, texture }).collect();
    render_with(scene, &bg, &apps, config)
}

/// Original and adversarial renders of one scene, sharing background,
/// camera, lighting and poses.
pub fn render_matched_pair(
    scene: &SceneSpec,
    background: &RgbImage,
    original: &[VehicleAppearance<'_>],
    adversarial: &[VehicleAppearance<'_>],
    config: &RenderConfig,
) -> Result<(RgbImage, RgbImage), RenderError> {
    Ok((render_with(scene, background, original, config)?, render_with(scene, background, adversarial, config)?))
}

pub fn texture_tensor(t: &TextureMap) -> Result<Tensor, RenderError> {
    Ok(Tensor::new(&[t.height, t.width, 3], t.data.clone())?)
}

pub fn vertex_tensor(mesh: &Mesh) -> Tensor {
    Tensor::new(&[mesh.vertices.len(), 3], mesh.vertices.iter().flatten().copied().collect()).expect("n x 3")
}
