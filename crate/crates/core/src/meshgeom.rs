//! Vehicle meshes, the per-vertex topology map and radial displacement
//! fields used by shape attacks.
//!
//! Model space convention: `x` runs along the vehicle (rear to front), `y` is
//! the lateral axis and `z` points up. The procedural vehicles are
//! heightfields over a `(u, v)` grid whose UV coordinates double as the
//! displacement sampling coordinates, so `v -> 1 - v` in UV space is exactly
//! the bilateral mirror `y -> -y`.

use std::fmt::Write as _;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{sigmoid, Tape, Tensor, TensorError, Var};

pub const MAX_VERTICES: usize = 1000;
pub const DISPLACEMENT_SIZE: usize = 64;
/// Latent value of an effectively undeformed field (`sigmoid(-10) ~ 4.5e-5`).
pub const UNDEFORMED_LATENT: f64 = -10.0;

const GRID_LENGTH: usize = 29;
const GRID_WIDTH: usize = 13;
/// How far the ground skirt sits outside the body footprint, as a fraction.
const SKIRT: f64 = 0.01;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleTemplate {
    Sedan,
    Van,
    Hatchback,
}

impl VehicleTemplate {
    pub const ALL: [VehicleTemplate; 3] =
        [VehicleTemplate::Sedan, VehicleTemplate::Van, VehicleTemplate::Hatchback];

    fn salt(self) -> u64 {
        match self {
            VehicleTemplate::Sedan => 0x5EDA,
            VehicleTemplate::Van => 0x0FA7,
            VehicleTemplate::Hatchback => 0x4A7C,
        }
    }
}

/// Longitudinal breakpoints (fraction of body length from the rear) shared by
/// every template so that window regions line up in UV space.
pub mod layout {
    pub const REAR_WINDOW: (f64, f64) = (0.24, 0.33);
    pub const WINDSHIELD: (f64, f64) = (0.62, 0.73);
    /// Lateral half-extent (as |q|) of the cabin roof and windows.
    pub const CABIN_HALF_WIDTH: f64 = 0.78;
    pub const SIDE_WINDOW_BAND: (f64, f64) = (0.62, 0.80);
    pub const LIGHT_DEPTH: f64 = 0.035;
    /// Grid shape `(along length, across width)`.
    pub const GRID: (usize, usize) = (super::GRID_LENGTH, super::GRID_WIDTH);

    /// Longitudinal body coordinate in `[0, 1]` for a UV `u`
    /// (negative or above one on the skirt ring).
    pub fn body_p(u: f64) -> f64 {
        let n = GRID.0 as f64 - 1.0;
        (u * n - 1.0) / (n - 2.0)
    }

    /// Lateral body coordinate in `[-1, 1]` for a UV `v`.
    pub fn body_q(v: f64) -> f64 {
        let n = GRID.1 as f64 - 1.0;
        let c = n / 2.0;
        (v * n - c) / (c - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub uvs: Vec<[f64; 2]>,
}

impl Mesh {
    pub fn new(
        vertices: Vec<[f64; 3]>,
        faces: Vec<[usize; 3]>,
        uvs: Vec<[f64; 2]>,
    ) -> Result<Self, MeshError> {
        let m = Self { vertices, faces, uvs };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        let n = self.vertices.len();
        if n == 0 || self.faces.is_empty() {
            return Err(MeshError::Invalid("empty mesh".into()));
        }
        if n > MAX_VERTICES {
            return Err(MeshError::Invalid(format!("{n} vertices exceeds {MAX_VERTICES}")));
        }
        if self.uvs.len() != n {
            return Err(MeshError::Invalid(format!("{} uvs for {n} vertices", self.uvs.len())));
        }
        let mut used = vec![false; n];
        for f in &self.faces {
            for &i in f {
                if i >= n {
                    return Err(MeshError::Invalid(format!("face index {i} out of range")));
                }
                used[i] = true;
            }
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(MeshError::Invalid(format!("vertex {i} is not referenced by any face")));
        }
        if self.uvs.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(MeshError::Invalid("uv outside [0,1]^2".into()));
        }
        if self.vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(MeshError::Invalid("non-finite vertex".into()));
        }
        if !(self.width() > 0.0) {
            return Err(MeshError::Invalid("zero lateral width".into()));
        }
        Ok(())
    }

    /// Lateral extent: largest difference of vertex `y` coordinates.
    pub fn width(&self) -> f64 {
        let (lo, hi) = self
            .vertices
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v[1]), hi.max(v[1])));
        hi - lo
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for k in 0..3 {
                c[k] += v[k];
            }
        }
        let n = self.vertices.len() as f64;
        c.map(|x| x / n)
    }

    /// Extent along `x` and `y`.
    pub fn footprint(&self) -> (f64, f64) {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (hi[0] - lo[0], hi[1] - lo[1])
    }

    /// For each vertex, the index of the vertex at `(x, -y, z)` (within `tol`),
    /// or `None` if the mesh is not bilaterally symmetric.
    pub fn bilateral_pairs(&self, tol: f64) -> Option<Vec<usize>> {
        self.vertices
            .iter()
            .map(|v| {
                self.vertices.iter().position(|w| {
                    (v[0] - w[0]).abs() <= tol && (v[1] + w[1]).abs() <= tol && (v[2] - w[2]).abs() <= tol
                })
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.vertices.len(), self.faces.len());
        for (v, uv) in self.vertices.iter().zip(&self.uvs) {
            let _ = writeln!(s, "v {} {} {} {} {}", v[0], v[1], v[2], uv[0], uv[1]);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0], f[1], f[2]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, MeshError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| MeshError::Parse("missing header".into()))?;
        let counts: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| MeshError::Parse(format!("bad header '{header}'"))))
            .collect::<Result<_, _>>()?;
        let [nv, nf] = counts[..] else {
            return Err(MeshError::Parse(format!("bad header '{header}'")));
        };
        let mut vertices = Vec::with_capacity(nv);
        let mut uvs = Vec::with_capacity(nv);
        let mut faces = Vec::with_capacity(nf);
        for line in lines {
            let mut it = line.split_whitespace();
            let tag = it.next().unwrap_or_default();
            let rest: Vec<&str> = it.collect();
            match (tag, rest.len()) {
                ("v", 5) => {
                    let p: Vec<f64> = rest
                        .iter()
                        .map(|t| t.parse().map_err(|_| MeshError::Parse(format!("bad vertex '{line}'"))))
                        .collect::<Result<_, _>>()?;
                    vertices.push([p[0], p[1], p[2]]);
                    uvs.push([p[3], p[4]]);
                }
                ("f", 3) => {
                    let p: Vec<usize> = rest
                        .iter()
                        .map(|t| t.parse().map_err(|_| MeshError::Parse(format!("bad face '{line}'"))))
                        .collect::<Result<_, _>>()?;
                    faces.push([p[0], p[1], p[2]]);
                }
                _ => return Err(MeshError::Parse(format!("unrecognised line '{line}'"))),
            }
        }
        if vertices.len() != nv || faces.len() != nf {
            return Err(MeshError::Parse(format!(
                "header promises {nv}/{nf}, found {}/{}",
                vertices.len(),
                faces.len()
            )));
        }
        Mesh::new(vertices, faces, uvs)
    }
}

struct Profile {
    length: f64,
    width: f64,
    body_height: f64,
    cabin_height: f64,
    hood_drop: f64,
    tail_drop: f64,
}

fn profile(template: VehicleTemplate, rng: &mut ChaCha8Rng) -> Profile {
    let j = |rng: &mut ChaCha8Rng, base: f64, spread: f64| base + rng.gen_range(-spread..=spread);
    match template {
        VehicleTemplate::Sedan => Profile {
            length: j(rng, 4.6, 0.25),
            width: j(rng, 1.80, 0.06),
            body_height: j(rng, 0.82, 0.05),
            cabin_height: j(rng, 1.45, 0.05),
            hood_drop: 0.12,
            tail_drop: 0.08,
        },
        VehicleTemplate::Van => Profile {
            length: j(rng, 4.9, 0.2),
            width: j(rng, 1.92, 0.05),
            body_height: j(rng, 1.0, 0.05),
            cabin_height: j(rng, 1.95, 0.08),
            hood_drop: 0.18,
            tail_drop: 0.0,
        },
        VehicleTemplate::Hatchback => Profile {
            length: j(rng, 4.1, 0.2),
            width: j(rng, 1.75, 0.05),
            body_height: j(rng, 0.85, 0.05),
            cabin_height: j(rng, 1.50, 0.05),
            hood_drop: 0.10,
            tail_drop: 0.02,
        },
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn height(pr: &Profile, p: f64, q: f64) -> f64 {
    let aq = q.abs();
    let lateral_round = 1.0 - 0.22 * aq.powi(4);
    let mut h = pr.body_height * lateral_round;
    // hood and boot slope down towards the ends
    h -= pr.hood_drop * smoothstep(layout::WINDSHIELD.1, 1.0, p);
    h -= pr.tail_drop * (1.0 - smoothstep(0.0, layout::REAR_WINDOW.0, p));
    let along = smoothstep(layout::REAR_WINDOW.0, layout::REAR_WINDOW.1, p)
        * (1.0 - smoothstep(layout::WINDSHIELD.0, layout::WINDSHIELD.1, p));
    let across = 1.0 - smoothstep(layout::SIDE_WINDOW_BAND.0, layout::SIDE_WINDOW_BAND.1 + 0.05, aq);
    h + (pr.cabin_height - pr.body_height) * along * across
}

/// Low-poly heightfield vehicle, deterministic per `(seed, template)`.
pub fn generate_vehicle_mesh(seed: u64, template: VehicleTemplate) -> Mesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (template.salt() << 32));
    let pr = profile(template, &mut rng);
    let (nu, nv) = layout::GRID;
    let centre = (nv - 1) / 2;
    let mut vertices = Vec::with_capacity(nu * nv);
    let mut uvs = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            let ring = i == 0 || i == nu - 1 || j == 0 || j == nv - 1;
            let p = match i {
                0 => -SKIRT,
                i if i == nu - 1 => 1.0 + SKIRT,
                i => (i - 1) as f64 / (nu - 3) as f64,
            };
            let sign = if j < centre { -1.0 } else { 1.0 };
            let aq = match j {
                0 => 1.0 + SKIRT,
                j if j == nv - 1 => 1.0 + SKIRT,
                j => j.abs_diff(centre) as f64 / (centre - 1) as f64,
            };
            let q = sign * aq;
            let pc = p.clamp(0.0, 1.0);
            // rounded corners: narrow the footprint near both ends
            let end = (2.0 * pc - 1.0).abs();
            let narrow = 1.0 - 0.12 * end.powi(6);
            let x = (p - 0.5) * pr.length;
            let y = q * 0.5 * pr.width * narrow;
            let z = if ring { 0.0 } else { height(&pr, pc, q.clamp(-1.0, 1.0)) };
            vertices.push([x, y, z]);
            uvs.push([i as f64 / (nu - 1) as f64, j as f64 / (nv - 1) as f64]);
        }
    }
    let idx = |i: usize, j: usize| i * nv + j;
    let mut faces = Vec::with_capacity(2 * (nu - 1) * (nv - 1));
    for i in 0..nu - 1 {
        for j in 0..nv - 1 {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            // mirror the diagonal across the centre line
            if j < centre {
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            } else {
                faces.push([a, b, d]);
                faces.push([b, c, d]);
            }
        }
    }
    Mesh { vertices, faces, uvs }
}

/// Reflection in UV space; `at` must fall on a half-cell boundary of the
/// displacement grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SymmetryAxis {
    /// `u -> 2*at - u` (mirrors columns)
    U(f64),
    /// `v -> 2*at - v` (mirrors rows)
    V(f64),
}

impl SymmetryAxis {
    fn reflect_index(at: f64, i: usize, n: usize) -> usize {
        let twice = (2.0 * at * n as f64).round() as i64;
        (twice - 1 - i as i64).rem_euclid(n as i64) as usize
    }

    pub fn reflect_uv(self, uv: [f64; 2]) -> [f64; 2] {
        match self {
            SymmetryAxis::U(a) => [(2.0 * a - uv[0]).rem_euclid(1.0), uv[1]],
            SymmetryAxis::V(a) => [uv[0], (2.0 * a - uv[1]).rem_euclid(1.0)],
        }
    }
}

/// The lateral mirror `v -> 1 - v` plus the fore/aft mirror `u -> 1 - u`.
pub const VEHICLE_AXES: [SymmetryAxis; 2] = [SymmetryAxis::V(0.5), SymmetryAxis::U(0.5)];

/// Per-unique-vertex displacement sampling coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TopologyMap {
    coords: Rc<Vec<(f64, f64)>>,
}

impl TopologyMap {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coord(&self, i: usize) -> (f64, f64) {
        self.coords[i]
    }

    pub fn coords(&self) -> Rc<Vec<(f64, f64)>> {
        Rc::clone(&self.coords)
    }
}

/// One sampling coordinate per unique vertex position.
///
/// Vertices sharing a position must also share a UV, otherwise the
/// displacement would tear the surface.
pub fn build_topology_map(mesh: &Mesh) -> Result<TopologyMap, MeshError> {
    if mesh.uvs.len() != mesh.vertices.len() {
        return Err(MeshError::Contract("uv count differs from vertex count".into()));
    }
    let key = |v: &[f64; 3]| v.map(|c| (c * 1e9).round() as i64);
    let mut seen: std::collections::HashMap<[i64; 3], [f64; 2]> = Default::default();
    for (v, uv) in mesh.vertices.iter().zip(&mesh.uvs) {
        if uv.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(MeshError::Contract("uv outside [0,1]^2".into()));
        }
        match seen.get(&key(v)) {
            Some(prev) if (prev[0] - uv[0]).abs() > 1e-9 || (prev[1] - uv[1]).abs() > 1e-9 => {
                return Err(MeshError::Topology(format!(
                    "vertex {v:?} carries conflicting uvs {prev:?} and {uv:?}"
                )));
            }
            Some(_) => {}
            None => {
                seen.insert(key(v), *uv);
            }
        }
    }
    let coords = mesh.uvs.iter().map(|uv| (uv[0], uv[1])).collect();
    Ok(TopologyMap { coords: Rc::new(coords) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    /// `[64, 64, 1]` pre-sigmoid values.
    pub latent: Tensor,
    pub axes: [SymmetryAxis; 2],
    pub pm: f64,
}

impl DisplacementField {
    pub fn new(latent: Tensor, axes: [SymmetryAxis; 2], pm: f64) -> Result<Self, MeshError> {
        let n = DISPLACEMENT_SIZE;
        if latent.shape() != [n, n, 1] {
            return Err(MeshError::Contract(format!(
                "displacement latent must be {n}x{n}x1, got {:?}",
                latent.shape()
            )));
        }
        if !(0.0..=1.0).contains(&pm) {
            return Err(MeshError::Contract(format!("perturbation magnitude {pm} outside [0,1]")));
        }
        Ok(Self { latent, axes, pm })
    }

    pub fn undeformed(pm: f64) -> Result<Self, MeshError> {
        let n = DISPLACEMENT_SIZE;
        Self::new(Tensor::full(&[n, n, 1], UNDEFORMED_LATENT), VEHICLE_AXES, pm)
    }

    pub fn to_csv(&self) -> String {
        let n = DISPLACEMENT_SIZE;
        let mut s = String::new();
        for row in self.latent.data().chunks(n) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, axes: [SymmetryAxis; 2], pm: f64) -> Result<Self, MeshError> {
        let n = DISPLACEMENT_SIZE;
        let mut data = Vec::with_capacity(n * n);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse().map_err(|_| MeshError::Parse(format!("bad cell '{t}'"))))
                .collect::<Result<_, _>>()?;
            if row.len() != n {
                return Err(MeshError::Parse(format!("row of {} cells, expected {n}", row.len())));
            }
            data.extend(row);
        }
        Self::new(Tensor::new(&[n, n, 1], data).map_err(|e| MeshError::Parse(e.to_string()))?, axes, pm)
    }
}

fn reflect_grid(data: &[f64], n: usize, axis: SymmetryAxis) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let (rr, cc) = match axis {
                SymmetryAxis::U(a) => (r, SymmetryAxis::reflect_index(a, c, n)),
                SymmetryAxis::V(a) => (SymmetryAxis::reflect_index(a, r, n), c),
            };
            out[r * n + c] = data[rr * n + cc];
        }
    }
    out
}

/// Average of the latent over the group generated by both reflections.
pub fn symmetrize(field: &DisplacementField) -> DisplacementField {
    let n = DISPLACEMENT_SIZE;
    let base = field.latent.data();
    let a = reflect_grid(base, n, field.axes[0]);
    let b = reflect_grid(base, n, field.axes[1]);
    let ab = reflect_grid(&a, n, field.axes[1]);
    let data: Vec<f64> = (0..n * n).map(|i| 0.25 * ((base[i] + ab[i]) + (a[i] + b[i]))).collect();
    let latent = Tensor::new(&[n, n, 1], data).expect("same shape");
    DisplacementField { latent, axes: field.axes, pm: field.pm }
}

pub fn is_symmetric(field: &DisplacementField, tol: f64) -> bool {
    let n = DISPLACEMENT_SIZE;
    let base = field.latent.data();
    field.axes.iter().all(|&ax| {
        reflect_grid(base, n, ax).iter().zip(base).all(|(a, b)| (a - b).abs() <= tol)
    })
}

/// Unit directions from the centroid to each vertex (zero at the centroid).
pub fn radial_directions(mesh: &Mesh) -> Vec<[f64; 3]> {
    let c = mesh.centroid();
    mesh.vertices
        .iter()
        .map(|v| {
            let r = [v[0] - c[0], v[1] - c[1], v[2] - c[2]];
            let len = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            if len < 1e-12 {
                [0.0; 3]
            } else {
                r.map(|x| x / len)
            }
        })
        .collect()
}

fn check_pair(mesh: &Mesh, topo: &TopologyMap) -> Result<(), MeshError> {
    if topo.len() != mesh.vertices.len() {
        return Err(MeshError::Contract(format!(
            "topology map has {} entries for {} vertices",
            topo.len(),
            mesh.vertices.len()
        )));
    }
    Ok(())
}

/// Records the displaced vertex positions `[n, 3]` on `tape`:
/// `V_i + pm * W * sigmoid(d_i) * R_i`, with `d_i` the wrap-around bilinear
/// sample of `latent` (`[64, 64, 1]`) at the vertex's topology coordinate.
pub fn displace_on_tape(
    tape: &mut Tape,
    mesh: &Mesh,
    topo: &TopologyMap,
    latent: Var,
    pm: f64,
) -> Result<Var, MeshError> {
    check_pair(mesh, topo)?;
    let n = DISPLACEMENT_SIZE;
    let grid = tape.reshape(latent, &[n, n])?;
    let d = tape.bilinear_sample(grid, topo.coords())?;
    let s = tape.sigmoid(d)?;
    let s = tape.scale(s, pm * mesh.width())?;
    let s3 = tape.broadcast_cols(s, 3)?;
    let dirs: Vec<f64> = radial_directions(mesh).into_iter().flatten().collect();
    let delta = tape.mul_const(s3, Rc::new(dirs))?;
    let base: Vec<f64> = mesh.vertices.iter().flatten().copied().collect();
    Ok(tape.add_const(delta, &base)?)
}

/// Displaced copy of `mesh`; the input is left untouched.
pub fn apply_displacement(
    mesh: &Mesh,
    field: &DisplacementField,
    topo: &TopologyMap,
) -> Result<Mesh, MeshError> {
    check_pair(mesh, topo)?;
    let n = DISPLACEMENT_SIZE;
    let grid = field.latent.clone().reshape(&[n, n])?;
    let scale = field.pm * mesh.width();
    let dirs = radial_directions(mesh);
    let mut out = mesh.clone();
    for (i, v) in out.vertices.iter_mut().enumerate() {
        let (u, w) = topo.coord(i);
        let d = crate::diffmath::bilinear_sample(&grid, u, w)?;
        let m = scale * sigmoid(d);
        for k in 0..3 {
            v[k] += m * dirs[i][k];
        }
    }
    Ok(out)
}

/// True iff every vertex of `b` lies within `pm * W(a)` of its counterpart.
pub fn deformation_bound_check(a: &Mesh, b: &Mesh, pm: f64) -> Result<bool, MeshError> {
    if a.vertices.len() != b.vertices.len() || a.faces != b.faces {
        return Err(MeshError::Contract("meshes do not share a topology".into()));
    }
    let bound = pm * a.width() * (1.0 + 1e-9);
    Ok(a.vertices.iter().zip(&b.vertices).all(|(p, q)| {
        let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() <= bound
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn norm(v: [f64; 3]) -> f64 {
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        for t in VehicleTemplate::ALL {
            let a = generate_vehicle_mesh(11, t);
            let b = generate_vehicle_mesh(11, t);
            assert_eq!(a.vertices, b.vertices);
            assert!(a.vertices.len() <= MAX_VERTICES);
            assert!(a.width() > 0.0);
            a.validate().unwrap();
            assert_ne!(generate_vehicle_mesh(12, t).vertices, a.vertices);
        }
    }

    #[test]
    fn generated_mesh_is_bilateral() {
        let m = generate_vehicle_mesh(3, VehicleTemplate::Sedan);
        let pairs = m.bilateral_pairs(1e-12).expect("symmetric");
        for (i, &j) in pairs.iter().enumerate() {
            assert_eq!(m.vertices[i][1].abs(), m.vertices[j][1].abs());
            // mirrored uv
            assert!((m.uvs[i][1] - (1.0 - m.uvs[j][1])).abs() < 1e-12);
            assert_eq!(m.uvs[i][0], m.uvs[j][0]);
        }
    }

    #[test]
    fn topology_cardinality_and_conflicts() {
        let m = generate_vehicle_mesh(1, VehicleTemplate::Van);
        let topo = build_topology_map(&m).unwrap();
        assert_eq!(topo.len(), m.vertices.len());

        // ten-vertex strip
        let vertices: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, (i % 2) as f64, 0.0]).collect();
        let uvs: Vec<[f64; 2]> = (0..10).map(|i| [i as f64 / 9.0, (i % 2) as f64]).collect();
        let faces: Vec<[usize; 3]> = (0..8).map(|i| [i, i + 1, i + 2]).collect();
        let strip = Mesh::new(vertices.clone(), faces.clone(), uvs.clone()).unwrap();
        assert_eq!(build_topology_map(&strip).unwrap().len(), 10);

        let mut dup_v = vertices;
        dup_v[9] = dup_v[0];
        let bad = Mesh { vertices: dup_v, faces, uvs };
        assert!(matches!(build_topology_map(&bad), Err(MeshError::Topology(_))));
    }

    #[test]
    fn constant_field_samples_constant() {
        let m = generate_vehicle_mesh(2, VehicleTemplate::Hatchback);
        let topo = build_topology_map(&m).unwrap();
        let grid = Tensor::full(&[64, 64], 0.37);
        for i in 0..topo.len() {
            let (u, v) = topo.coord(i);
            let d = crate::diffmath::bilinear_sample(&grid, u, v).unwrap();
            assert!((d - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetrize_examples() {
        let n = DISPLACEMENT_SIZE;
        let sym = DisplacementField::undeformed(0.3).unwrap();
        assert_eq!(symmetrize(&sym), sym);

        // orbit of cell (5, 9): rows mirror 5 <-> 58, columns 9 <-> 54
        let mut data = vec![0.0; n * n];
        data[5 * n + 9] = 0.0;
        data[58 * n + 9] = 1.0;
        data[5 * n + 54] = 0.0;
        data[58 * n + 54] = 1.0;
        let f = DisplacementField::new(Tensor::new(&[n, n, 1], data).unwrap(), VEHICLE_AXES, 0.3)
            .unwrap();
        let s = symmetrize(&f);
        for idx in [5 * n + 9, 58 * n + 9, 5 * n + 54, 58 * n + 54] {
            assert!((s.latent.data()[idx] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let m = generate_vehicle_mesh(4, VehicleTemplate::Sedan);
        let topo = build_topology_map(&m).unwrap();
        let mut f = DisplacementField::undeformed(0.0).unwrap();
        f.latent = Tensor::full(&[64, 64, 1], 3.0);
        let out = apply_displacement(&m, &f, &topo).unwrap();
        assert_eq!(out.vertices, m.vertices);
    }

    #[test]
    fn very_negative_latent_barely_moves() {
        let m = generate_vehicle_mesh(4, VehicleTemplate::Sedan);
        let topo = build_topology_map(&m).unwrap();
        let mut f = DisplacementField::undeformed(1.0).unwrap();
        f.latent = Tensor::full(&[64, 64, 1], -20.0);
        let out = apply_displacement(&m, &f, &topo).unwrap();
        let w = m.width();
        let worst = m
            .vertices
            .iter()
            .zip(&out.vertices)
            .map(|(a, b)| norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]]))
            .fold(0.0, f64::max);
        assert!(worst <= w * 2.1e-9, "{worst}");
    }

    #[test]
    fn hand_evaluated_single_vertex_shift() {
        // centroid at origin, lateral width 2, probe vertex at (1, 0, 0)
        let vertices = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]];
        let uvs = vec![[0.5, 0.5]; 4];
        let faces = vec![[0, 2, 1], [0, 1, 3]];
        let m = Mesh::new(vertices, faces, uvs).unwrap();
        assert_eq!(m.width(), 2.0);
        let topo = build_topology_map(&m).unwrap();
        let mut f = DisplacementField::undeformed(0.5).unwrap();
        f.latent = Tensor::zeros(&[64, 64, 1]);
        let out = apply_displacement(&m, &f, &topo).unwrap();
        let dv = [out.vertices[0][0] - 1.0, out.vertices[0][1], out.vertices[0][2]];
        assert!((dv[0] - 0.5).abs() < 1e-15 && dv[1] == 0.0 && dv[2] == 0.0);
        assert!(deformation_bound_check(&m, &out, 0.5).unwrap());
    }

    #[test]
    fn bound_check_examples() {
        let m = generate_vehicle_mesh(9, VehicleTemplate::Van);
        assert!(deformation_bound_check(&m, &m, 0.0).unwrap());
        let mut moved = m.clone();
        moved.vertices[17][2] += 2.0 * 0.2 * m.width();
        assert!(!deformation_bound_check(&m, &moved, 0.2).unwrap());
        let other = generate_vehicle_mesh(1, VehicleTemplate::Van);
        let mut broken = other.clone();
        broken.faces.pop();
        assert!(deformation_bound_check(&m, &broken, 0.1).is_err());
    }

    #[test]
    fn mesh_text_round_trip() {
        let m = generate_vehicle_mesh(5, VehicleTemplate::Sedan);
        let back = Mesh::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(Mesh::from_text("3 1\nv 0 0 0 0 0\n").is_err());
    }

    #[test]
    fn displacement_csv_round_trip() {
        let mut f = DisplacementField::undeformed(0.2).unwrap();
        f.latent.data_mut()[77] = 1.25;
        let back = DisplacementField::from_csv(&f.to_csv(), VEHICLE_AXES, 0.2).unwrap();
        assert_eq!(back, f);
    }

    fn random_field(seed: u64, pm: f64) -> DisplacementField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent = Tensor::from_fn(&[64, 64, 1], |_| rng.gen_range(-4.0..4.0));
        DisplacementField::new(latent, VEHICLE_AXES, pm).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn symmetrize_is_idempotent_and_invariant(seed in 0u64..1000) {
            let f = random_field(seed, 0.3);
            let s = symmetrize(&f);
            prop_assert!(is_symmetric(&s, 1e-12));
            let ss = symmetrize(&s);
            prop_assert!(ss.latent.max_abs_diff(&s.latent) <= 1e-12);
        }

        #[test]
        fn displacement_is_bounded_radial_and_mirrored(
            seed in 0u64..1000,
            pm in 0.0f64..1.0,
            t in 0usize..3,
        ) {
            let mesh = generate_vehicle_mesh(seed, VehicleTemplate::ALL[t]);
            let topo = build_topology_map(&mesh).unwrap();
            let field = symmetrize(&random_field(seed + 1, pm));
            let out = apply_displacement(&mesh, &field, &topo).unwrap();
            prop_assert!(deformation_bound_check(&mesh, &out, pm).unwrap());
            let c = mesh.centroid();
            for (a, b) in mesh.vertices.iter().zip(&out.vertices) {
                let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let r = [a[0] - c[0], a[1] - c[1], a[2] - c[2]];
                let cross = [
                    d[1] * r[2] - d[2] * r[1],
                    d[2] * r[0] - d[0] * r[2],
                    d[0] * r[1] - d[1] * r[0],
                ];
                prop_assert!(norm(cross) <= 1e-9);
            }
            let pairs = mesh.bilateral_pairs(1e-12).unwrap();
            for (i, &j) in pairs.iter().enumerate() {
                let (p, q) = (out.vertices[i], out.vertices[j]);
                prop_assert!((p[0] - q[0]).abs() <= 1e-9);
                prop_assert!((p[1] + q[1]).abs() <= 1e-9);
                prop_assert!((p[2] - q[2]).abs() <= 1e-9);
            }
        }
    }
}
