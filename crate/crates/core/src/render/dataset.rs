//! Annotated synthetic datasets and their JSON-lines manifest.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{render_scene_painted, vehicle_center_pixel, BackgroundSource, RenderConfig, RenderError, SceneSampler, SceneSpec};
use crate::camotex::training_paint;
use crate::diffmath::Tensor;
use crate::image::RgbImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: usize,
    /// `(x, y)` pixel coordinates in the final image.
    pub center: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub scene: SceneSpec,
    pub size: usize,
    /// 8-bit interleaved RGB.
    pub pixels: Vec<u8>,
    pub annotations: Vec<Annotation>,
}

impl Sample {
    pub fn image(&self) -> RgbImage {
        RgbImage::from_u8(self.size, self.size, &self.pixels).expect("square rgb")
    }

    /// `[3, H, W]` input tensor in `[0, 1]`.
    pub fn chw(&self) -> Tensor {
        let n = self.size * self.size;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(&[3, self.size, self.size], out).expect("3 x h x w")
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        self.annotations.iter().map(|a| a.center).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_images: usize,
    pub seed: u64,
    pub empty_fraction: f64,
    pub config: RenderConfig,
    pub min_vehicles: usize,
    pub max_vehicles: usize,
    /// Share of vehicles wearing a random pattern instead of factory paint.
    pub patterned_fraction: f64,
    pub jobs: usize,
}

impl DatasetSpec {
    pub fn new(n_images: usize, seed: u64, config: RenderConfig) -> Self {
        Self { n_images, seed, empty_fraction: 0.3, config, min_vehicles: 1, max_vehicles: 5, patterned_fraction: 0.5, jobs: 1 }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        self.config.validate()?;
        if !(0.0..=1.0).contains(&self.patterned_fraction) {
            return Err(RenderError::Contract(format!("patterned fraction {} outside [0,1]", self.patterned_fraction)));
        }
        if !(0.0..=1.0).contains(&self.empty_fraction) {
            return Err(RenderError::Contract(format!("empty fraction {} outside [0,1]", self.empty_fraction)));
        }
        if self.min_vehicles == 0 || self.min_vehicles > self.max_vehicles {
            return Err(RenderError::Contract("vehicle count range must satisfy 1 <= min <= max".into()));
        }
        Ok(())
    }

    /// Per-image seed derived from the master seed and the index.
    pub fn image_seed(&self, index: usize) -> u64 {
        let mut z = self.seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn is_empty_image(&self, seed: u64) -> bool {
        // top 53 bits as a uniform draw, independent of the scene stream
        let u = ((seed.rotate_left(17) ^ 0xE3E7) >> 11) as f64 / (1u64 << 53) as f64;
        u < self.empty_fraction
    }
}

/// Renders and annotates one image of the dataset.
pub fn render_sample(spec: &DatasetSpec, index: usize, backgrounds: &BackgroundSource) -> Result<Sample, RenderError> {
    let seed = spec.image_seed(index);
    let sampler = SceneSampler::new(spec.config);
    let cap = sampler.capacity().max(1);
    let range = if spec.is_empty_image(seed) {
        0..=0
    } else {
        spec.min_vehicles.min(cap)..=spec.max_vehicles.min(cap)
    };
    let scene = sampler.sample(seed, range)?;
    let img = render_scene_painted(&scene, backgrounds, &spec.config, |s| training_paint(s, spec.patterned_fraction))?;
    let annotations = scene
        .vehicles
        .iter()
        .enumerate()
        .map(|(id, v)| Annotation { id, center: vehicle_center_pixel(&v.mesh.build(), v, &scene.camera, &spec.config) })
        .collect();
    Ok(Sample { seed, scene, size: spec.config.image_size, pixels: img.to_u8(), annotations })
}

/// All images of `spec`, in index order; independent of `spec.jobs`.
pub fn generate_samples(spec: &DatasetSpec, backgrounds: &BackgroundSource) -> Result<Vec<Sample>, RenderError> {
    spec.validate()?;
    #[cfg(feature = "parallel")]
    if spec.jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.jobs)
            .build()
            .map_err(|e| RenderError::Contract(e.to_string()))?;
        return pool.install(|| (0..spec.n_images).into_par_iter().map(|i| render_sample(spec, i, backgrounds)).collect());
    }
    (0..spec.n_images).map(|i| render_sample(spec, i, backgrounds)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub seed: u64,
    pub annotations: Vec<[f64; 2]>,
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Writes PNGs under `dir/images` plus `dir/manifest.jsonl`. On failure the
/// files written so far are removed.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<Vec<ManifestRecord>, RenderError> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| {
        let mut records = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let rel = format!("images/{i:05}.png");
            let path = dir.join(&rel);
            written.push(path.clone());
            s.image().save_png(&path)?;
            records.push(ManifestRecord { path: rel, seed: s.seed, annotations: s.centers() });
        }
        let manifest = dir.join(MANIFEST);
        written.push(manifest.clone());
        let mut f = fs::File::create(&manifest)?;
        for r in &records {
            let line = serde_json::to_string(r).map_err(|e| RenderError::Manifest(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        f.sync_all()?;
        Ok(records)
    })();
    if result.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
    }
    result
}

pub fn generate_dataset(
    spec: &DatasetSpec,
    backgrounds: &BackgroundSource,
    dir: &Path,
) -> Result<Vec<ManifestRecord>, RenderError> {
    write_dataset(&generate_samples(spec, backgrounds)?, dir)
}

pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestRecord>, RenderError> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| RenderError::Manifest(format!("line {}: {e}", n + 1))))
        .collect()
}
