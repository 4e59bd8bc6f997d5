//! Z-buffered triangle rasterization with flat sun + ambient shading.
//!
//! Gradients reach texture texels through the bilinear taps, vertex positions
//! through the screen-space barycentric UV interpolation and through the
//! face normals used for shading. Coverage is piecewise constant.

use crate::diffmath::kernels::bilinear_taps;
use crate::diffmath::{CustomOp, Tape, Tensor, Var};
use crate::meshgeom::Mesh;

use super::{model_to_world, rotation, Camera, Lighting, Projector, RenderConfig, RenderError, VehiclePlacement};

pub struct VehicleInput<'a> {
    pub mesh: &'a Mesh,
    /// `[n, 3]` model-space vertex positions (possibly displaced).
    pub vertices: Var,
    /// `[Ht, Wt, 3]` texture in UV space.
    pub texture: Var,
    pub placement: &'a VehiclePlacement,
}

pub struct RasterOutput {
    /// `[3, Hs, Ws]` shaded color times coverage.
    pub foreground: Var,
    /// Coverage per supersampled pixel, 0 or 1.
    pub alpha: Vec<f64>,
    pub degenerate_faces: usize,
    pub covered_pixels: usize,
}

struct Fragment {
    pixel: usize,
    vehicle: usize,
    face: usize,
    lambda: [f64; 3],
    uv: [f64; 2],
}

#[derive(Clone, Copy)]
struct FaceShade {
    /// unit normal in world space
    normal: [f64; 3],
    length: f64,
    lit: bool,
    shade: f64,
    /// `d uv / d pixel`, row-major 2x2
    uv_jacobian: [[f64; 2]; 2],
}

struct VehicleCache {
    faces: Vec<[usize; 3]>,
    uvs: Vec<[f64; 2]>,
    world: Vec<[f64; 3]>,
    rot: [[f64; 3]; 3],
    shades: Vec<Option<FaceShade>>,
    tex_h: usize,
    tex_w: usize,
}

struct RasterOp {
    vehicles: Vec<VehicleCache>,
    fragments: Vec<Fragment>,
    plane: usize,
    projector: Projector,
    sun: [f64; 3],
    ambient: f64,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Bilinear color, its `(u, v)` derivatives and the taps used.
fn sample(tex: &[f64], h: usize, w: usize, uv: [f64; 2]) -> ([f64; 3], [[f64; 3]; 2], [(usize, f64); 4]) {
    let taps = bilinear_taps(h, w, uv[0], uv[1]);
    let texel = |i: usize| [tex[3 * i], tex[3 * i + 1], tex[3 * i + 2]];
    let (t00, t01, t10, t11) = (texel(taps[0].0), texel(taps[1].0), texel(taps[2].0), texel(taps[3].0));
    let x = uv[0].rem_euclid(1.0) * w as f64 - 0.5;
    let y = uv[1].rem_euclid(1.0) * h as f64 - 0.5;
    let (fx, fy) = (x - x.floor(), y - y.floor());
    let mut color = [0.0; 3];
    let mut d = [[0.0; 3]; 2];
    for c in 0..3 {
        color[c] = taps.iter().zip([t00, t01, t10, t11]).map(|((_, wt), t)| wt * t[c]).sum();
        d[0][c] = w as f64 * ((1.0 - fy) * (t01[c] - t00[c]) + fy * (t11[c] - t10[c]));
        d[1][c] = h as f64 * ((1.0 - fx) * (t10[c] - t00[c]) + fx * (t11[c] - t01[c]));
    }
    (color, d, taps)
}

fn face_shade(
    world: &[[f64; 3]; 3],
    screen: &[[f64; 2]; 3],
    uvs: &[[f64; 2]; 3],
    sun: [f64; 3],
    ambient: f64,
) -> Option<FaceShade> {
    let n = cross(sub(world[1], world[0]), sub(world[2], world[0]));
    let length = dot(n, n).sqrt();
    let (e1, e2) = (
        [screen[1][0] - screen[0][0], screen[1][1] - screen[0][1]],
        [screen[2][0] - screen[0][0], screen[2][1] - screen[0][1]],
    );
    let det = e1[0] * e2[1] - e1[1] * e2[0];
    if length < 1e-12 || det.abs() < 1e-9 {
        return None;
    }
    let normal = n.map(|x| x / length);
    let cosine = dot(normal, sun);
    let lit = cosine > 0.0;
    let shade = ambient + (1.0 - ambient) * cosine.max(0.0);
    // inverse of [e1 e2] maps pixel offsets to barycentric (l1, l2)
    let inv = [[e2[1] / det, -e2[0] / det], [-e1[1] / det, e1[0] / det]];
    let du = [uvs[1][0] - uvs[0][0], uvs[2][0] - uvs[0][0]];
    let dv = [uvs[1][1] - uvs[0][1], uvs[2][1] - uvs[0][1]];
    let uv_jacobian = [
        [du[0] * inv[0][0] + du[1] * inv[1][0], du[0] * inv[0][1] + du[1] * inv[1][1]],
        [dv[0] * inv[0][0] + dv[1] * inv[1][0], dv[0] * inv[0][1] + dv[1] * inv[1][1]],
    ];
    Some(FaceShade { normal, length, lit, shade, uv_jacobian })
}

/// Rasterizes every vehicle into the supersampled frame of `config`.
pub fn rasterize(
    tape: &mut Tape,
    vehicles: &[VehicleInput<'_>],
    camera: &Camera,
    lighting: &Lighting,
    config: &RenderConfig,
) -> Result<RasterOutput, RenderError> {
    config.validate()?;
    let size = config.fine_size();
    let plane = size * size;
    let projector = Projector::new(camera, config);
    let sun = lighting.sun();
    let ambient = lighting.ambient.clamp(0.0, 1.0);

    let mut caches = Vec::with_capacity(vehicles.len());
    let mut screens = Vec::with_capacity(vehicles.len());
    let mut degenerate = 0;
    for v in vehicles {
        let vs = tape.shape(v.vertices);
        if vs != [v.mesh.vertices.len(), 3] {
            return Err(RenderError::Contract(format!("vertex tensor {vs:?} does not match the mesh")));
        }
        let ts = tape.shape(v.texture);
        if ts.len() != 3 || ts[2] != 3 {
            return Err(RenderError::Contract(format!("texture tensor {ts:?} is not HxWx3")));
        }
        let (tex_h, tex_w) = (ts[0], ts[1]);
        let rot = rotation(v.placement.yaw);
        let world: Vec<[f64; 3]> = tape
            .data(v.vertices)
            .chunks_exact(3)
            .map(|p| model_to_world([p[0], p[1], p[2]], &rot, v.placement.position))
            .collect();
        let screen: Vec<[f64; 2]> = world.iter().map(|w| projector.to_pixel(*w)).collect();
        let shades: Vec<Option<FaceShade>> = v
            .mesh
            .faces
            .iter()
            .map(|f| {
                let s = face_shade(
                    &f.map(|i| world[i]),
                    &f.map(|i| screen[i]),
                    &f.map(|i| v.mesh.uvs[i]),
                    sun,
                    ambient,
                );
                if s.is_none() {
                    degenerate += 1;
                }
                s
            })
            .collect();
        caches.push(VehicleCache {
            faces: v.mesh.faces.clone(),
            uvs: v.mesh.uvs.clone(),
            world,
            rot,
            shades,
            tex_h,
            tex_w,
        });
        screens.push(screen);
    }

    // pass 1: depth test, remembering the winning (vehicle, face)
    let mut depth = vec![f64::NEG_INFINITY; plane];
    let mut owner = vec![(usize::MAX, 0usize); plane];
    for (k, cache) in caches.iter().enumerate() {
        let screen = &screens[k];
        for (fi, face) in cache.faces.iter().enumerate() {
            if cache.shades[fi].is_none() {
                continue;
            }
            let p = face.map(|i| screen[i]);
            let z = face.map(|i| projector.nearness(cache.world[i]));
            let (min_x, max_x) = (p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min), p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max));
            let (min_y, max_y) = (p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min), p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max));
            let c0 = (min_x - 0.5).ceil().max(0.0) as usize;
            let r0 = (min_y - 0.5).ceil().max(0.0) as usize;
            let c1 = ((max_x - 0.5).floor() as i64).min(size as i64 - 1);
            let r1 = ((max_y - 0.5).floor() as i64).min(size as i64 - 1);
            if c1 < 0 || r1 < 0 {
                continue;
            }
            for r in r0..=r1 as usize {
                for c in c0..=c1 as usize {
                    let Some(l) = barycentric(&p, [c as f64 + 0.5, r as f64 + 0.5]) else { continue };
                    let d = l[0] * z[0] + l[1] * z[1] + l[2] * z[2];
                    let idx = r * size + c;
                    if d > depth[idx] {
                        depth[idx] = d;
                        owner[idx] = (k, fi);
                    }
                }
            }
        }
    }

    // pass 2: shade winners
    let mut out = vec![0.0; 3 * plane];
    let mut alpha = vec![0.0; plane];
    let mut fragments = Vec::new();
    for (idx, &(k, fi)) in owner.iter().enumerate() {
        if k == usize::MAX {
            continue;
        }
        let cache = &caches[k];
        let face = cache.faces[fi];
        let p = face.map(|i| screens[k][i]);
        let pixel = [(idx % size) as f64 + 0.5, (idx / size) as f64 + 0.5];
        let lambda = barycentric_unchecked(&p, pixel);
        let mut uv = [0.0; 2];
        for j in 0..3 {
            uv[0] += lambda[j] * cache.uvs[face[j]][0];
            uv[1] += lambda[j] * cache.uvs[face[j]][1];
        }
        let shade = cache.shades[fi].expect("rasterized faces are shaded").shade;
        let (color, _, _) = sample(tape.data(vehicles[k].texture), cache.tex_h, cache.tex_w, uv);
        for c in 0..3 {
            out[c * plane + idx] = shade * color[c];
        }
        alpha[idx] = 1.0;
        fragments.push(Fragment { pixel: idx, vehicle: k, face: fi, lambda, uv });
    }
    let covered = fragments.len();
    let inputs: Vec<Var> = vehicles.iter().flat_map(|v| [v.texture, v.vertices]).collect();
    let op = RasterOp { vehicles: caches, fragments, plane, projector, sun, ambient };
    let foreground = tape.custom(inputs, Tensor::new(&[3, size, size], out)?, Box::new(op))?;
    Ok(RasterOutput { foreground, alpha, degenerate_faces: degenerate, covered_pixels: covered })
}

fn barycentric_unchecked(p: &[[f64; 2]; 3], q: [f64; 2]) -> [f64; 3] {
    let e = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let area = e(p[0], p[1], p[2]);
    let l0 = e(q, p[1], p[2]) / area;
    let l1 = e(p[0], q, p[2]) / area;
    [l0, l1, 1.0 - l0 - l1]
}

fn barycentric(p: &[[f64; 2]; 3], q: [f64; 2]) -> Option<[f64; 3]> {
    let l = barycentric_unchecked(p, q);
    const TOL: f64 = -1e-12;
    (l[0] >= TOL && l[1] >= TOL && l[2] >= TOL).then_some(l)
}

impl CustomOp for RasterOp {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let plane = self.plane;
        let jac = self.projector.jacobian();
        let mut face_gshade: Vec<Vec<f64>> = self.vehicles.iter().map(|v| vec![0.0; v.faces.len()]).collect();
        let mut slots: Vec<(Option<&mut Vec<f64>>, Option<&mut Vec<f64>>)> = grads
            .chunks_mut(2)
            .map(|pair| {
                let (a, b) = pair.split_at_mut(1);
                (a[0].as_mut(), b[0].as_mut())
            })
            .collect();

        for f in &self.fragments {
            let g = [grad_out[f.pixel], grad_out[plane + f.pixel], grad_out[2 * plane + f.pixel]];
            if g == [0.0; 3] {
                continue;
            }
            let cache = &self.vehicles[f.vehicle];
            let shade = cache.shades[f.face].expect("fragment from a shaded face");
            let tex = inputs[2 * f.vehicle].data();
            let (color, dcolor, taps) = sample(tex, cache.tex_h, cache.tex_w, f.uv);
            if let Some(dt) = slots[f.vehicle].0.as_deref_mut() {
                for (i, w) in taps {
                    for c in 0..3 {
                        dt[3 * i + c] += shade.shade * w * g[c];
                    }
                }
            }
            if let Some(dv) = slots[f.vehicle].1.as_deref_mut() {
                face_gshade[f.vehicle][f.face] += g[0] * color[0] + g[1] * color[1] + g[2] * color[2];
                // d out / d uv
                let g_uv = [
                    shade.shade * (g[0] * dcolor[0][0] + g[1] * dcolor[0][1] + g[2] * dcolor[0][2]),
                    shade.shade * (g[0] * dcolor[1][0] + g[1] * dcolor[1][1] + g[2] * dcolor[1][2]),
                ];
                // uv(p) under a moved vertex j: d uv / d p_j = -lambda_j * J
                let j = shade.uv_jacobian;
                let g_p = [
                    g_uv[0] * j[0][0] + g_uv[1] * j[1][0],
                    g_uv[0] * j[0][1] + g_uv[1] * j[1][1],
                ];
                let face = cache.faces[f.face];
                for (slot, &vi) in face.iter().enumerate() {
                    let s = -f.lambda[slot];
                    let gw = [
                        s * (g_p[0] * jac[0][0] + g_p[1] * jac[1][0]),
                        s * (g_p[0] * jac[0][1] + g_p[1] * jac[1][1]),
                        s * (g_p[0] * jac[0][2] + g_p[1] * jac[1][2]),
                    ];
                    add_world_grad(dv, vi, gw, &cache.rot);
                }
            }
        }

        for (k, cache) in self.vehicles.iter().enumerate() {
            let Some(dv) = slots[k].1.as_deref_mut() else { continue };
            for (fi, face) in cache.faces.iter().enumerate() {
                let gs = face_gshade[k][fi];
                let Some(shade) = cache.shades[fi] else { continue };
                if gs == 0.0 || !shade.lit {
                    continue;
                }
                // shade = a + (1-a) n.s with n = cross / |cross|
                let g_nhat = self.sun.map(|s| gs * (1.0 - self.ambient) * s);
                let nd = dot(shade.normal, g_nhat);
                let g_n = [0, 1, 2].map(|i| (g_nhat[i] - shade.normal[i] * nd) / shade.length);
                let w = face.map(|i| cache.world[i]);
                let (e1, e2) = (sub(w[1], w[0]), sub(w[2], w[0]));
                let g_e1 = cross(e2, g_n);
                let g_e2 = cross(g_n, e1);
                add_world_grad(dv, face[1], g_e1, &cache.rot);
                add_world_grad(dv, face[2], g_e2, &cache.rot);
                add_world_grad(dv, face[0], [0, 1, 2].map(|i| -g_e1[i] - g_e2[i]), &cache.rot);
            }
        }
    }
}

/// Pulls a world-space gradient back through `w = R v + t`.
fn add_world_grad(dv: &mut [f64], vi: usize, gw: [f64; 3], rot: &[[f64; 3]; 3]) {
    for a in 0..3 {
        dv[3 * vi + a] += rot[0][a] * gw[0] + rot[1][a] * gw[1] + rot[2][a] * gw[2];
    }
}
