//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export has a plain Rust twin returning `Result<_, String>` so the
//! logic is testable off the browser.

use camoforge::attack::{final_texture, ScenePool};
use camoforge::camotex::{original_paint, paint_mask, ConstraintFlags, Palette, TextureParam};
use camoforge::diffmath::{Tensor, DEFAULT_TAU};
use camoforge::evalmetrics::{attack_label, easr, p1, practicality_score, AttackKind, MatchedEvalResult};
use camoforge::image::RgbImage;
use camoforge::meshgeom::{apply_displacement, DisplacementField, DISPLACEMENT_SIZE, VEHICLE_AXES};
use camoforge::render::{render_with, BackgroundSource, RenderConfig, VehicleAppearance};
use wasm_bindgen::prelude::*;

const DEMO_PALETTE: [[f64; 3]; 5] =
    [[0.16, 0.18, 0.14], [0.42, 0.40, 0.30], [0.62, 0.60, 0.52], [0.30, 0.34, 0.22], [0.85, 0.84, 0.80]];

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.to_u8().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Random texture under `flags` (e.g. `PixFcMa`), as 512x512 RGBA. Color
/// restricted textures are shown after palette projection.
pub fn texture_rgba(flags: &str, seed: u32) -> Result<Vec<u8>, String> {
    Ok(rgba(&random_texture(flags, seed)?))
}

fn random_texture(flags: &str, seed: u32) -> Result<RgbImage, String> {
    let f: ConstraintFlags = flags.parse().map_err(|e| format!("{e}"))?;
    let palette = f.color_restricted().then(|| Palette::new(DEMO_PALETTE.to_vec())).transpose().map_err(|e| e.to_string())?;
    let (mask, original) = if f.ma { (Some(paint_mask()), Some(original_paint(seed as u64))) } else { (None, None) };
    let param = TextureParam::init(f, palette, mask, original, seed as u64).map_err(|e| e.to_string())?;
    final_texture(&param, DEFAULT_TAU).map_err(|e| e.to_string())
}

/// One overhead scene of `size` pixels whose vehicle wears a random `flags`
/// texture and a random shape perturbation of magnitude `pm`.
pub fn scene_rgba(seed: u32, size: u32, flags: &str, pm: f64) -> Result<Vec<u8>, String> {
    if !(16..=384).contains(&size) {
        return Err(format!("image size {size} outside 16..=384"));
    }
    let pool = ScenePool::sample(RenderConfig::train(size as usize), 1, seed as u64, &BackgroundSource::Procedural)
        .map_err(|e| e.to_string())?;
    let ps = &pool.scenes[0];
    let pmesh = &pool.meshes[ps.mesh];
    let texture = if flags.is_empty() { original_paint(ps.scene.vehicles[0].paint_seed) } else { random_texture(flags, seed)? };
    let n = DISPLACEMENT_SIZE;
    let mut state = seed as u64 | 1;
    let latent = Tensor::from_fn(&[n, n, 1], |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 6.0 - 3.0
    });
    let field = DisplacementField::new(latent, VEHICLE_AXES, pm).map_err(|e| e.to_string())?;
    let mesh = apply_displacement(&pmesh.mesh, &camoforge::meshgeom::symmetrize(&field), &pmesh.topology)
        .map_err(|e| e.to_string())?;
    let app = [VehicleAppearance { mesh: &mesh, texture: &texture }];
    let img = render_with(&ps.scene, &ps.background, &app, &pool.render).map_err(|e| e.to_string())?;
    Ok(rgba(&img))
}

/// ASR, ER, EASR, practicality and P1 for matched outcome counts, as JSON.
pub fn score_json(v_dd: u32, v_dm: u32, v_md: u32, v_mm: u32, flags: &str, kind: &str, pm: f64) -> Result<String, String> {
    let f: ConstraintFlags = flags.parse().map_err(|e| format!("{e}"))?;
    let kind = match kind {
        "texture" => AttackKind::Texture,
        "shape" => AttackKind::Shape,
        "combined" => AttackKind::Combined,
        other => return Err(format!("unknown attack kind {other:?}")),
    };
    let counts = MatchedEvalResult { v_dd: v_dd as usize, v_dm: v_dm as usize, v_md: v_md as usize, v_mm: v_mm as usize };
    let rates = easr(&counts).ok();
    let ledger = practicality_score(f, kind).map_err(|e| e.to_string())?;
    let pr = if kind == AttackKind::Texture { 1.0 } else { 1.0 - pm };
    Ok(serde_json::json!({
        "label": attack_label(f, kind),
        "asr": rates.map(|r| r.asr),
        "er": rates.map(|r| r.er),
        "easr": rates.map(|r| r.easr),
        "practicality": {
            "pc": ledger.pc.to_string(),
            "di": ledger.di.to_string(),
            "do": ledger.dop.to_string(),
            "total": ledger.total(),
        },
        "pr": pr,
        "p1": rates.map(|r| p1(r.easr, pr)),
    })
    .to_string())
}

#[wasm_bindgen(js_name = textureRgba)]
pub fn texture_rgba_js(flags: &str, seed: u32) -> Result<Vec<u8>, JsError> {
    texture_rgba(flags, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = sceneRgba)]
pub fn scene_rgba_js(seed: u32, size: u32, flags: &str, pm: f64) -> Result<Vec<u8>, JsError> {
    scene_rgba(seed, size, flags, pm).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = scoreJson)]
pub fn score_json_js(v_dd: u32, v_dm: u32, v_md: u32, v_mm: u32, flags: &str, kind: &str, pm: f64) -> Result<String, JsError> {
    score_json(v_dd, v_dm, v_md, v_mm, flags, kind, pm).map_err(|e| JsError::new(&e))
}
