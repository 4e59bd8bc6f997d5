//! Procedural overhead ground tiles (grass, asphalt, roads, roofs, trees) and
//! a loader for user-supplied tiles.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RenderError;
use crate::image::RgbImage;

#[derive(Clone, Debug)]
pub enum BackgroundSource {
    Procedural,
    Tiles(Vec<RgbImage>),
}

impl BackgroundSource {
    /// Every `*.png` in `dir`, sorted by file name.
    pub fn load_tiles(dir: &Path) -> Result<Self, RenderError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(RenderError::Contract(format!("no png tiles in {}", dir.display())));
        }
        let tiles = paths.iter().map(|p| RgbImage::load_png(p)).collect::<Result<_, _>>()?;
        Ok(Self::Tiles(tiles))
    }

    pub fn get(&self, id: u64, size: usize) -> Result<RgbImage, RenderError> {
        match self {
            Self::Procedural => Ok(procedural_background(id, size, super::GSD)),
            Self::Tiles(tiles) => {
                let tile = &tiles[(id % tiles.len() as u64) as usize];
                if tile.width < size || tile.height < size {
                    return Err(RenderError::Contract(format!(
                        "tile {}x{} smaller than {size}x{size}",
                        tile.width, tile.height
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(id);
                let r0 = rng.gen_range(0..=tile.height - size);
                let c0 = rng.gen_range(0..=tile.width - size);
                let mut out = RgbImage::filled(size, size, [0.0; 3]);
                for r in 0..size {
                    for c in 0..size {
                        out.set_pixel(r, c, tile.pixel(r0 + r, c0 + c));
                    }
                }
                Ok(out)
            }
        }
    }
}

fn hash(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut z = seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = hash(ix, iy, seed) * (1.0 - sx) + hash(ix + 1, iy, seed) * sx;
    let b = hash(ix, iy + 1, seed) * (1.0 - sx) + hash(ix + 1, iy + 1, seed) * sx;
    a * (1.0 - sy) + b * sy
}

/// Fractal noise in `[0, 1]` with base wavelength `scale` meters.
fn fbm(x: f64, y: f64, scale: f64, octaves: usize, seed: u64) -> f64 {
    let (mut sum, mut amp, mut norm, mut f) = (0.0, 1.0, 0.0, 1.0 / scale);
    for o in 0..octaves {
        sum += amp * value_noise(x * f, y * f, seed.wrapping_add(o as u64 * 7919));
        norm += amp;
        amp *= 0.5;
        f *= 2.0;
    }
    sum / norm
}

struct Rect {
    cx: f64,
    cy: f64,
    half: [f64; 2],
    cos: f64,
    sin: f64,
}

impl Rect {
    /// Coordinates of `(x, y)` in the rectangle frame.
    fn local(&self, x: f64, y: f64) -> [f64; 2] {
        let (dx, dy) = (x - self.cx, y - self.cy);
        [self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy]
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let l = self.local(x, y);
        l[0].abs() <= self.half[0] && l[1].abs() <= self.half[1]
    }
}

struct Road {
    /// unit normal of the road axis and the signed offset of the axis
    n: [f64; 2],
    offset: f64,
    half_width: f64,
    dash_phase: f64,
    yellow: bool,
}

struct Layout {
    ground: [f64; 3],
    ground_var: f64,
    roads: Vec<Road>,
    stalls: Option<(f64, f64, f64)>,
    buildings: Vec<(Rect, [f64; 3])>,
    trees: Vec<([f64; 2], f64)>,
    clutter: Vec<(Rect, [f64; 3])>,
    shadow: [f64; 2],
    seed: u64,
}

fn rand_rect(rng: &mut ChaCha8Rng, extent: f64, size: (f64, f64)) -> Rect {
    let a: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    Rect {
        cx: rng.gen_range(-extent..extent),
        cy: rng.gen_range(-extent..extent),
        half: [rng.gen_range(size.0..size.1) / 2.0, rng.gen_range(size.0..size.1) / 2.0],
        cos: a.cos(),
        sin: a.sin(),
    }
}

fn layout(seed: u64, extent: f64) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB6D0);
    let grounds = [
        ([0.30, 0.42, 0.20], 0.10),
        ([0.38, 0.38, 0.37], 0.05),
        ([0.58, 0.57, 0.54], 0.05),
        ([0.46, 0.38, 0.28], 0.08),
        ([0.24, 0.34, 0.18], 0.12),
    ];
    let (ground, ground_var) = grounds[rng.gen_range(0..grounds.len())];
    let roads = (0..rng.gen_range(0..=2))
        .map(|_| {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Road {
                n: [a.cos(), a.sin()],
                offset: rng.gen_range(-0.6 * extent..0.6 * extent),
                half_width: rng.gen_range(3.0..5.0),
                dash_phase: rng.gen_range(0.0..6.0),
                yellow: rng.gen_bool(0.3),
            }
        })
        .collect();
    let stalls = rng.gen_bool(0.3).then(|| {
        let a: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        (a, rng.gen_range(2.4..2.8), rng.gen_range(0.0..2.5))
    });
    let roofs = [[0.55, 0.30, 0.22], [0.45, 0.45, 0.47], [0.25, 0.25, 0.27], [0.70, 0.68, 0.62], [0.35, 0.22, 0.18]];
    let buildings = (0..rng.gen_range(0..=3))
        .map(|_| (rand_rect(&mut rng, extent, (5.0, 14.0)), roofs[rng.gen_range(0..roofs.len())]))
        .collect();
    let trees = (0..rng.gen_range(0..=6))
        .map(|_| ([rng.gen_range(-extent..extent), rng.gen_range(-extent..extent)], rng.gen_range(1.5..3.5)))
        .collect();
    let clutter = (0..rng.gen_range(0..=4))
        .map(|_| (rand_rect(&mut rng, extent, (0.8, 2.0)), [rng.gen(), rng.gen(), rng.gen()]))
        .collect();
    let sa: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    Layout { ground, ground_var, roads, stalls, buildings, trees, clutter, shadow: [sa.cos() * 1.2, sa.sin() * 1.2], seed }
}

fn shade(c: [f64; 3], f: f64) -> [f64; 3] {
    c.map(|v| (v * f).clamp(0.0, 1.0))
}

fn ground_color(l: &Layout, x: f64, y: f64) -> [f64; 3] {
    let n = fbm(x, y, 4.0, 4, l.seed) - 0.5;
    let fine = hash((x * 8.0) as i64, (y * 8.0) as i64, l.seed ^ 0x51) - 0.5;
    let mut c = l.ground.map(|v| v * (1.0 + 2.0 * l.ground_var * n) + 0.03 * fine);
    for road in &l.roads {
        let d = road.n[0] * x + road.n[1] * y - road.offset;
        if d.abs() <= road.half_width {
            let along = -road.n[1] * x + road.n[0] * y;
            let wear = fbm(x, y, 2.0, 3, l.seed ^ 0xA5) - 0.5;
            c = [0.26, 0.26, 0.27].map(|v| v + 0.06 * wear + 0.02 * fine);
            let edge = road.half_width - d.abs() < 0.2;
            let dash = d.abs() < 0.08 && (along + road.dash_phase).rem_euclid(6.0) < 3.0;
            if edge || dash {
                c = if road.yellow && dash { [0.80, 0.68, 0.20] } else { [0.85, 0.85, 0.82] };
            }
        }
    }
    if let Some((a, spacing, phase)) = l.stalls {
        let u = a.cos() * x + a.sin() * y + phase;
        let v = -a.sin() * x + a.cos() * y;
        if u.rem_euclid(spacing) < 0.1 && v.rem_euclid(11.0) < 5.0 {
            c = [0.86, 0.86, 0.84];
        }
    }
    c
}

fn color_at(l: &Layout, x: f64, y: f64) -> [f64; 3] {
    let mut c = ground_color(l, x, y);
    let in_shadow = l.buildings.iter().any(|(r, _)| r.contains(x - l.shadow[0], y - l.shadow[1]))
        || l.trees.iter().any(|(p, rad)| (x - l.shadow[0] * 0.6 - p[0]).hypot(y - l.shadow[1] * 0.6 - p[1]) < *rad);
    if in_shadow {
        c = shade(c, 0.55);
    }
    for (r, col) in &l.clutter {
        if r.contains(x, y) {
            c = *col;
        }
    }
    for (r, roof) in &l.buildings {
        if r.contains(x, y) {
            let loc = r.local(x, y);
            let rim = (r.half[0] - loc[0].abs()).min(r.half[1] - loc[1].abs()) < 0.3;
            let ridge = if loc[1] > 0.0 { 1.05 } else { 0.9 };
            let n = fbm(x, y, 1.5, 2, l.seed ^ 0x77) - 0.5;
            c = shade(roof.map(|v| v + 0.05 * n), if rim { 0.75 } else { ridge });
        }
    }
    for (p, rad) in &l.trees {
        let d = (x - p[0]).hypot(y - p[1]);
        let wobble = 0.4 * (fbm(x, y, 0.8, 2, l.seed ^ 0x33) - 0.5);
        if d < rad + wobble {
            let n = fbm(x, y, 0.6, 3, l.seed ^ 0x99);
            c = [0.12 + 0.10 * n, 0.24 + 0.14 * n, 0.10 + 0.06 * n];
        }
    }
    c.map(|v| v.clamp(0.0, 1.0))
}

/// Deterministic `size x size` ground tile at `gsd` meters per pixel.
pub fn procedural_background(seed: u64, size: usize, gsd: f64) -> RgbImage {
    let extent = size as f64 * gsd / 2.0;
    let l = layout(seed, extent);
    let mut img = RgbImage::filled(size, size, [0.0; 3]);
    for r in 0..size {
        for c in 0..size {
            let x = (c as f64 + 0.5) * gsd - extent;
            let y = extent - (r as f64 + 0.5) * gsd;
            img.set_pixel(r, c, color_at(&l, x, y));
        }
    }
    img
}
