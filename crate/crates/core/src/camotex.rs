//! Adversarial texture parameterizations and the practicality constraints:
//! spatial resolution (`Pix`), spatial restriction (`Ma`) and color
//! restriction with a fixed (`Fc`) or learnable (`Lc`) palette.
//!
//! Textures are `[512, 512, 3]` HWC rasters in UV space; rows follow `v`,
//! columns follow `u`.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{Layout, Tape, Tensor, TensorError, Var, SOFTLIKE_EPS};
use crate::image::{ImageError, RgbImage};
use crate::meshgeom::layout;

pub const TEXTURE_SIZE: usize = 512;
pub const PIX_LATENT: usize = 32;
pub const BLOCK: usize = TEXTURE_SIZE / PIX_LATENT;
pub const DEFAULT_COLORS: usize = 5;
const KMEANS_SEED: u64 = 0x6B6D;
const KMEANS_MAX_ITER: usize = 100;
const KMEANS_TOL: f64 = 1e-6;

pub type TextureMap = RgbImage;

#[derive(Debug, Error)]
pub enum TexError {
    #[error("contract error: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConstraintFlags {
    pub pix: bool,
    pub ma: bool,
    pub lc: bool,
    pub fc: bool,
}

impl ConstraintFlags {
    pub const NONE: ConstraintFlags = ConstraintFlags { pix: false, ma: false, lc: false, fc: false };

    pub fn validate(self) -> Result<(), TexError> {
        if self.lc && self.fc {
            return Err(TexError::Contract("Lc and Fc are mutually exclusive".into()));
        }
        Ok(())
    }

    pub fn color_restricted(self) -> bool {
        self.lc || self.fc
    }

    /// Number of practicality properties the flags address, `0..=3`.
    pub fn count(self) -> usize {
        self.pix as usize + self.ma as usize + self.color_restricted() as usize
    }
}

impl fmt::Display for ConstraintFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        if self.pix {
            s.push_str("Pix");
        }
        if self.lc {
            s.push_str("Lc");
        }
        if self.fc {
            s.push_str("Fc");
        }
        if self.ma {
            s.push_str("Ma");
        }
        if s.is_empty() {
            s.push('U');
        }
        f.write_str(&s)
    }
}

impl FromStr for ConstraintFlags {
    type Err = TexError;

    /// Accepts labels such as `U`, `PixFcMa` or `Pix+Ma`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut flags = ConstraintFlags::NONE;
        let mut rest = s.trim();
        if rest == "U" || rest.is_empty() || rest.eq_ignore_ascii_case("none") {
            return Ok(flags);
        }
        while !rest.is_empty() {
            rest = rest.trim_start_matches(['+', ',', ' ']);
            let lower = rest.to_ascii_lowercase();
            let (flag, len) = if lower.starts_with("pix") {
                (&mut flags.pix, 3)
            } else if lower.starts_with("ma") {
                (&mut flags.ma, 2)
            } else if lower.starts_with("lc") {
                (&mut flags.lc, 2)
            } else if lower.starts_with("fc") {
                (&mut flags.fc, 2)
            } else if rest.is_empty() {
                break;
            } else {
                return Err(TexError::Parse(format!("unknown constraint in '{s}'")));
            };
            *flag = true;
            rest = &rest[len..];
        }
        flags.validate()?;
        Ok(flags)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    colors: Vec<[f64; 3]>,
}

impl Palette {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self, TexError> {
        if colors.len() < 2 {
            return Err(TexError::Contract(format!("palette needs >= 2 colors, got {}", colors.len())));
        }
        if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(TexError::Contract("palette color outside [0,1]".into()));
        }
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                if dist2(colors[i], colors[j]).sqrt() <= 1e-6 {
                    return Err(TexError::Contract(format!("palette colors {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { colors })
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), 3], self.colors.iter().flatten().copied().collect()).expect("n x 3")
    }

    /// Rebuilds from an `[N, 3]` tensor, clamping into the unit cube.
    pub fn from_tensor(t: &Tensor) -> Result<Self, TexError> {
        if t.shape().len() != 2 || t.shape()[1] != 3 {
            return Err(TexError::Contract(format!("palette tensor {:?}", t.shape())));
        }
        let colors = t
            .data()
            .chunks_exact(3)
            .map(|c| [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)])
            .collect();
        Self::new(colors)
    }

    pub fn mean(&self) -> [f64; 3] {
        let n = self.len() as f64;
        let mut m = [0.0; 3];
        for c in &self.colors {
            for k in 0..3 {
                m[k] += c[k] / n;
            }
        }
        m
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("r,g,b\n");
        for c in &self.colors {
            s.push_str(&format!("{},{},{}\n", c[0], c[1], c[2]));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, TexError> {
        let rows = parse_csv_rows(text, Some(3))?;
        Self::new(rows.into_iter().map(|r| [r[0], r[1], r[2]]).collect())
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Numeric CSV rows; a non-numeric first line is treated as a header.
fn parse_csv_rows(text: &str, width: Option<usize>) -> Result<Vec<Vec<f64>>, TexError> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let parsed: Result<Vec<f64>, _> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => {
                if let Some(w) = width.or(rows.first().map(Vec::len)) {
                    if r.len() != w {
                        return Err(TexError::Parse(format!("row {n}: {} fields, expected {w}", r.len())));
                    }
                }
                rows.push(r);
            }
            Err(_) if n == 0 => {}
            Err(_) => return Err(TexError::Parse(format!("row {n}: '{line}'"))),
        }
    }
    Ok(rows)
}

/// Binary paintability map: `1` where camouflage may be applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub size: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self, TexError> {
        if values.len() != size * size {
            return Err(TexError::Contract(format!("{} mask values for {size}x{size}", values.len())));
        }
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(TexError::Contract("mask must be binary".into()));
        }
        Ok(Self { size, values })
    }

    pub fn filled(size: usize, on: bool) -> Self {
        Self { size, values: vec![if on { 1.0 } else { 0.0 }; size * size] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.size + col] == 1.0
    }

    pub fn paintable_fraction(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    fn per_channel(&self) -> Vec<f64> {
        self.values.iter().flat_map(|&m| [m, m, m]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextureParam {
    pub flags: ConstraintFlags,
    /// `[32, 32, 3]` with `Pix`, else `[512, 512, 3]`; absent with color restriction.
    pub latent_rgb: Option<Tensor>,
    /// `[side*side, N]` positive rows; `side` is 32 with `Pix`, else 512.
    pub latent_probs: Option<Tensor>,
    pub palette: Option<Palette>,
    pub mask: Option<Mask>,
    pub original: Option<TextureMap>,
}

impl TextureParam {
    pub fn latent_side(&self) -> usize {
        if self.flags.pix {
            PIX_LATENT
        } else {
            TEXTURE_SIZE
        }
    }

    pub fn validate(&self) -> Result<(), TexError> {
        self.flags.validate()?;
        let side = self.latent_side();
        let contract = |m: String| Err(TexError::Contract(m));
        if self.flags.color_restricted() {
            let Some(palette) = &self.palette else {
                return contract("color restriction requires a palette".into());
            };
            let Some(p) = &self.latent_probs else {
                return contract("color restriction requires latent probabilities".into());
            };
            if p.shape() != [side * side, palette.len()] {
                return contract(format!("latent probabilities {:?}", p.shape()));
            }
            if self.latent_rgb.is_some() {
                return contract("color-restricted texture carries an rgb latent".into());
            }
        } else {
            match &self.latent_rgb {
                Some(t) if t.shape() == [side, side, 3] => {}
                Some(t) => return contract(format!("rgb latent {:?}, expected [{side}, {side}, 3]", t.shape())),
                None => return contract("missing rgb latent".into()),
            }
            if self.latent_probs.is_some() {
                return contract("unrestricted texture carries latent probabilities".into());
            }
        }
        if self.flags.ma != self.mask.is_some() || self.flags.ma != self.original.is_some() {
            return contract("mask and original texture are required exactly when Ma is set".into());
        }
        if let (Some(m), Some(o)) = (&self.mask, &self.original) {
            if m.size != TEXTURE_SIZE || o.width != TEXTURE_SIZE || o.height != TEXTURE_SIZE {
                return contract("mask and original must be 512x512".into());
            }
        }
        Ok(())
    }

    /// Random initial latent for `flags`; rgb latents are uniform, probability
    /// rows are near-uniform.
    pub fn init(
        flags: ConstraintFlags,
        palette: Option<Palette>,
        mask: Option<Mask>,
        original: Option<TextureMap>,
        seed: u64,
    ) -> Result<Self, TexError> {
        flags.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = if flags.pix { PIX_LATENT } else { TEXTURE_SIZE };
        let (latent_rgb, latent_probs) = if flags.color_restricted() {
            let n = palette
                .as_ref()
                .ok_or_else(|| TexError::Contract("color restriction requires a palette".into()))?
                .len();
            let mut t = Tensor::from_fn(&[side * side, n], |_| 1.0 + 0.2 * rng.gen::<f64>());
            normalize_rows(t.data_mut(), n);
            (None, Some(t))
        } else {
            (Some(Tensor::from_fn(&[side, side, 3], |_| rng.gen::<f64>())), None)
        };
        let param = Self {
            flags,
            latent_rgb,
            latent_probs,
            palette: if flags.color_restricted() { palette } else { None },
            mask,
            original,
        };
        param.validate()?;
        Ok(param)
    }

    /// Copy whose probability rows are one-hot on their argmax.
    pub fn projected(&self) -> TextureParam {
        let mut out = self.clone();
        if let (Some(p), Some(pal)) = (&mut out.latent_probs, &self.palette) {
            let n = pal.len();
            for row in p.data_mut().chunks_exact_mut(n) {
                let k = argmax(row);
                row.fill(0.0);
                row[k] = 1.0;
            }
        }
        out
    }

    /// Keeps latents inside their feasible sets after an optimizer step.
    pub fn clamp_latents(&mut self) {
        if let Some(t) = &mut self.latent_rgb {
            t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        if let Some(t) = &mut self.latent_probs {
            t.data_mut().iter_mut().for_each(|v| *v = v.max(SOFTLIKE_EPS));
        }
    }

    pub fn probs_to_csv(&self) -> Option<String> {
        let p = self.latent_probs.as_ref()?;
        let n = p.shape()[1];
        let mut s = String::new();
        for row in p.data().chunks_exact(n) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        Some(s)
    }

    pub fn probs_from_csv(text: &str, n_colors: usize) -> Result<Tensor, TexError> {
        let rows = parse_csv_rows(text, Some(n_colors))?;
        let r = rows.len();
        Ok(Tensor::new(&[r, n_colors], rows.into_iter().flatten().collect())?)
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

fn normalize_rows(data: &mut [f64], n: usize) {
    for row in data.chunks_exact_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

/// Leaves created by [`compose_on_tape`]; absent entries are not part of the
/// parameterization.
#[derive(Clone, Copy, Debug)]
pub struct TextureVars {
    pub rgb: Option<Var>,
    pub probs: Option<Var>,
    pub palette: Option<Var>,
}

fn check_pix_latent(shape: &[usize]) -> Result<(), TexError> {
    if shape != [PIX_LATENT, PIX_LATENT, 3] {
        return Err(TexError::Contract(format!(
            "pixelated latent must be {PIX_LATENT}x{PIX_LATENT}x3, got {shape:?}"
        )));
    }
    Ok(())
}

/// Nearest-neighbor 16x replication of a `[32, 32, 3]` latent (clamped).
pub fn pixelize_on_tape(tape: &mut Tape, latent: Var) -> Result<Var, TexError> {
    check_pix_latent(tape.shape(latent))?;
    let c = tape.clamp(latent, 0.0, 1.0)?;
    Ok(tape.upsample_nearest(c, BLOCK, Layout::Hwc)?)
}

pub fn pixelize(latent: &Tensor) -> Result<TextureMap, TexError> {
    check_pix_latent(latent.shape())?;
    let mut tape = Tape::new();
    let x = tape.constant(latent.clone())?;
    let y = pixelize_on_tape(&mut tape, x)?;
    Ok(RgbImage::new(TEXTURE_SIZE, TEXTURE_SIZE, tape.data(y).to_vec())?)
}

/// `original * (1 - mask) + adversarial * mask`, differentiable in `adversarial`.
pub fn mask_on_tape(
    tape: &mut Tape,
    original: &TextureMap,
    adversarial: Var,
    mask: &Mask,
) -> Result<Var, TexError> {
    let s = [mask.size, mask.size, 3];
    if tape.shape(adversarial) != s || original.width != mask.size || original.height != mask.size {
        return Err(TexError::Contract("texture and mask shapes differ".into()));
    }
    let m = mask.per_channel();
    let keep: Vec<f64> = original.data.iter().zip(&m).map(|(o, m)| o * (1.0 - m)).collect();
    let painted = tape.mul_const(adversarial, Rc::new(m))?;
    Ok(tape.add_const(painted, &keep)?)
}

pub fn apply_mask(
    original: &TextureMap,
    adversarial: &TextureMap,
    mask: &Mask,
) -> Result<TextureMap, TexError> {
    if (original.width, original.height) != (adversarial.width, adversarial.height)
        || original.width != mask.size
        || original.height != mask.size
    {
        return Err(TexError::Contract("texture and mask shapes differ".into()));
    }
    let data = original
        .data
        .iter()
        .zip(&adversarial.data)
        .zip(mask.per_channel())
        .map(|((o, a), m)| o * (1.0 - m) + a * m)
        .collect();
    Ok(RgbImage::new(original.width, original.height, data)?)
}

/// Deterministic k-means++ / Lloyd clustering of every background pixel.
pub fn palette_from_backgrounds(images: &[RgbImage], n_colors: usize) -> Result<Palette, TexError> {
    if n_colors < 2 {
        return Err(TexError::Contract(format!("n_colors {n_colors} < 2")));
    }
    let points: Vec<[f64; 3]> = images.iter().flat_map(|im| im.pixels()).collect();
    let mut distinct = std::collections::HashSet::new();
    for p in &points {
        distinct.insert(p.map(f64::to_bits));
        if distinct.len() >= n_colors {
            break;
        }
    }
    if distinct.len() < n_colors {
        return Err(TexError::Degenerate(format!(
            "{} distinct pixel values for {n_colors} colors",
            distinct.len()
        )));
    }
    Palette::new(kmeans(&points, n_colors, KMEANS_SEED))
}

fn kmeans(points: &[[f64; 3]], k: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(*p, centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = points[pick];
        centres.push(c);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(*p, c));
        }
    }
    let mut sums = vec![[0.0; 3]; k];
    let mut counts = vec![0usize; k];
    for _ in 0..KMEANS_MAX_ITER {
        sums.iter_mut().for_each(|s| *s = [0.0; 3]);
        counts.fill(0);
        for p in points {
            let j = nearest(&centres, *p);
            counts[j] += 1;
            for c in 0..3 {
                sums[j][c] += p[c];
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let m = sums[j].map(|s| s / counts[j] as f64);
            shift = shift.max(dist2(m, centres[j]).sqrt());
            centres[j] = m;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    centres
}

fn nearest(centres: &[[f64; 3]], p: [f64; 3]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centres.iter().enumerate() {
        let d = dist2(p, *c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

fn color_field_on_tape(
    tape: &mut Tape,
    param: &TextureParam,
    tau: f64,
) -> Result<(Var, Var, Var), TexError> {
    let (Some(probs), Some(palette)) = (&param.latent_probs, &param.palette) else {
        return Err(TexError::Contract("color field needs latent probabilities and a palette".into()));
    };
    if probs.shape().len() != 2 || probs.shape()[1] != palette.len() {
        return Err(TexError::Contract(format!("latent probabilities {:?}", probs.shape())));
    }
    let p = tape.param(probs.clone())?;
    let c = if param.flags.lc {
        tape.param(palette.to_tensor())?
    } else {
        tape.constant(palette.to_tensor())?
    };
    let w = tape.softlike(p, tau)?;
    let w = tape.softlike(w, tau)?;
    let rgb = tape.matmul(w, c)?;
    Ok((rgb, p, c))
}

/// Per-pixel palette mixture with weights `softlike(softlike(p))`, at latent
/// resolution.
pub fn render_color_field(param: &TextureParam, tau: f64) -> Result<TextureMap, TexError> {
    let mut tape = Tape::new();
    let (rgb, ..) = color_field_on_tape(&mut tape, param, tau)?;
    let n = tape.shape(rgb)[0];
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(TexError::Contract(format!("{n} probability rows are not a square field")));
    }
    Ok(RgbImage::new(side, side, tape.data(rgb).to_vec())?)
}

/// Row-wise softmax of the probability latent.
pub fn renormalize_probs(param: &TextureParam) -> TextureParam {
    let mut out = param.clone();
    if let Some(p) = &mut out.latent_probs {
        let n = p.shape()[1];
        for row in p.data_mut().chunks_exact_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

fn finish_texture(
    tape: &mut Tape,
    param: &TextureParam,
    latent_rgb: Var,
) -> Result<Var, TexError> {
    let mut t = if param.flags.pix {
        pixelize_on_tape(tape, latent_rgb)?
    } else {
        tape.clamp(latent_rgb, 0.0, 1.0)?
    };
    if param.flags.ma {
        let (Some(o), Some(m)) = (&param.original, &param.mask) else {
            return Err(TexError::Contract("Ma requires a mask and an original texture".into()));
        };
        t = mask_on_tape(tape, o, t, m)?;
    }
    Ok(t)
}

/// Hard assignment of every pixel to its most probable palette color (lowest
/// index on ties), then the same upscaling and masking as [`compose_texture`].
pub fn project_colors(param: &TextureParam) -> Result<TextureMap, TexError> {
    param.validate()?;
    if !param.flags.color_restricted() {
        return Err(TexError::Contract("projection needs a color-restricted texture".into()));
    }
    let (p, pal) = (param.latent_probs.as_ref().unwrap(), param.palette.as_ref().unwrap());
    let side = param.latent_side();
    let data: Vec<f64> = p.data().chunks_exact(pal.len()).flat_map(|row| pal.colors()[argmax(row)]).collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[side, side, 3], data)?)?;
    let t = finish_texture(&mut tape, param, x)?;
    Ok(RgbImage::new(TEXTURE_SIZE, TEXTURE_SIZE, tape.data(t).to_vec())?)
}

/// Records the full constraint pipeline on `tape`: color field (Lc/Fc) or
/// clamped rgb latent, 16x upscale (Pix), then masking (Ma). The result is a
/// `[512, 512, 3]` variable.
pub fn compose_on_tape(
    tape: &mut Tape,
    param: &TextureParam,
    tau: f64,
) -> Result<(Var, TextureVars), TexError> {
    param.validate()?;
    let side = param.latent_side();
    let (rgb, vars) = if param.flags.color_restricted() {
        let (rgb, p, c) = color_field_on_tape(tape, param, tau)?;
        let rgb = tape.reshape(rgb, &[side, side, 3])?;
        (rgb, TextureVars { rgb: None, probs: Some(p), palette: Some(c) })
    } else {
        let x = tape.param(param.latent_rgb.clone().unwrap())?;
        (x, TextureVars { rgb: Some(x), probs: None, palette: None })
    };
    Ok((finish_texture(tape, param, rgb)?, vars))
}

pub fn compose_texture(param: &TextureParam, tau: f64) -> Result<TextureMap, TexError> {
    let mut tape = Tape::new();
    let (t, _) = compose_on_tape(&mut tape, param, tau)?;
    Ok(RgbImage::new(TEXTURE_SIZE, TEXTURE_SIZE, tape.data(t).to_vec())?)
}

fn texel_body_coords(row: usize, col: usize) -> (f64, f64) {
    let u = (col as f64 + 0.5) / TEXTURE_SIZE as f64;
    let v = (row as f64 + 0.5) / TEXTURE_SIZE as f64;
    (layout::body_p(u), layout::body_q(v))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Region {
    Body,
    Window,
    HeadLight,
    TailLight,
}

fn region(p: f64, q: f64) -> Region {
    let aq = q.abs();
    let within = |x: f64, (a, b): (f64, f64)| x >= a && x <= b;
    if aq < layout::CABIN_HALF_WIDTH && (within(p, layout::WINDSHIELD) || within(p, layout::REAR_WINDOW)) {
        return Region::Window;
    }
    if within(aq, layout::SIDE_WINDOW_BAND) && p > layout::REAR_WINDOW.0 && p < layout::WINDSHIELD.1 {
        return Region::Window;
    }
    if (0.45..=0.92).contains(&aq) {
        if (0.0..layout::LIGHT_DEPTH).contains(&p) {
            return Region::TailLight;
        }
        if p > 1.0 - layout::LIGHT_DEPTH && p <= 1.0 {
            return Region::HeadLight;
        }
    }
    Region::Body
}

/// Paintability mask of the shared vehicle UV layout: windows and lights are
/// excluded.
pub fn paint_mask() -> Mask {
    let n = TEXTURE_SIZE;
    let values = (0..n * n)
        .map(|i| {
            let (p, q) = texel_body_coords(i / n, i % n);
            if region(p, q) == Region::Body {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Mask { size: n, values }
}

const PAINTS: [[f64; 3]; 9] = [
    [0.93, 0.93, 0.92],
    [0.08, 0.08, 0.09],
    [0.62, 0.63, 0.66],
    [0.35, 0.36, 0.38],
    [0.62, 0.07, 0.08],
    [0.10, 0.20, 0.48],
    [0.80, 0.80, 0.78],
    [0.18, 0.32, 0.20],
    [0.78, 0.62, 0.30],
];

/// Factory-style paint job for the shared UV layout: one body color (random
/// among common car paints, sometimes two-tone or striped), dark glass and
/// lights.
pub fn original_paint(seed: u64) -> TextureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9A17);
    let body = if rng.gen_bool(0.8) {
        PAINTS[rng.gen_range(0..PAINTS.len())]
    } else {
        [rng.gen(), rng.gen(), rng.gen()]
    };
    let jitter = 0.04 * (rng.gen::<f64>() - 0.5);
    let body = body.map(|c: f64| (c + jitter).clamp(0.0, 1.0));
    let style = rng.gen_range(0..4u8);
    let accent = PAINTS[rng.gen_range(0..PAINTS.len())];
    let glass = [0.06, 0.08, 0.11];
    let n = TEXTURE_SIZE;
    let mut img = RgbImage::filled(n, n, body);
    for r in 0..n {
        for c in 0..n {
            let (p, q) = texel_body_coords(r, c);
            let color = match region(p, q) {
                Region::Window => glass,
                Region::HeadLight => [0.95, 0.94, 0.86],
                Region::TailLight => [0.75, 0.08, 0.08],
                Region::Body => match style {
                    // contrasting roof
                    1 if p > layout::REAR_WINDOW.1 && p < layout::WINDSHIELD.0 && q.abs() < layout::SIDE_WINDOW_BAND.0 => accent,
                    // twin stripes
                    2 if (0.08..0.2).contains(&q.abs()) => accent,
                    _ => body,
                },
            };
            img.set_pixel(r, c, color);
        }
    }
    img
}

/// Paint used for detector training data: the factory paint, or with
/// probability `patterned` a random pattern on the paintable body (half of
/// the time over windows and lights too). Patterns are per-texel or blocky
/// uniform noise, blocky multi-color camouflage, or random stripes.
pub fn training_paint(seed: u64, patterned: f64) -> TextureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E41_3D);
    let mut img = original_paint(seed);
    if !rng.gen_bool(patterned.clamp(0.0, 1.0)) {
        return img;
    }
    let n = TEXTURE_SIZE;
    let mask = paint_mask();
    let block = [1usize, 2, 4, 8, 16, 32][rng.gen_range(0..6)];
    let cells = n.div_ceil(block);
    let kind = rng.gen_range(0..3u8);
    let colors: Vec<[f64; 3]> = (0..rng.gen_range(2..6)).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let whole_body = rng.gen_bool(0.5);
    let grid: Vec<[f64; 3]> = match kind {
        0 => (0..cells * cells).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
        1 => (0..cells * cells).map(|_| colors[rng.gen_range(0..colors.len())]).collect(),
        _ => {
            let (period, vertical) = (rng.gen_range(2..12usize), rng.gen_bool(0.5));
            (0..cells * cells)
                .map(|i| {
                    let k = if vertical { i % cells } else { i / cells };
                    colors[(k / period.div_ceil(block).max(1)) % colors.len()]
                })
                .collect()
        }
    };
    for r in 0..n {
        for c in 0..n {
            if whole_body || mask.get(r, c) {
                img.set_pixel(r, c, grid[(r / block) * cells + c / block]);
            }
        }
    }
    img
}
