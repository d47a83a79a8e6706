//! Procedural paired-illumination scenes with analytically exact intrinsics.
//!
//! A scene is a per-pixel G-buffer (position, normal, albedo, specular tint,
//! shininess) ray-cast from seeded primitives: a checkered ground plane plus
//! 1–5 textured spheres and boxes. Lighting is direct-only — point,
//! directional, and constant ambient — with binary shadow rays and a
//! Blinn-Phong lobe for the non-diffuse residual. Because shading is
//! analytic, the renderer emits per-mechanism passes whose composition
//! reproduces its beauty output to float precision: ground truth with zero
//! decomposition error.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{lane, RngStream};
use crate::imgcore::{self, ColorSpace, FloatBuffer, ImageRgb};
use crate::intrinsics::{
    build_conditioning, compose_image, passes_to_intrinsics, percentile_rescale,
    ConditioningStack, IntrinsicTriplet, IntrinsicsError, RenderPasses,
};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("at least one light is required")]
    NoLights,
    #[error("invalid light: {0}")]
    BadLight(String),
    #[error("invalid scene file: {0}")]
    BadSceneFile(String),
    #[error("invalid lights file: {0}")]
    BadLightsFile(String),
    #[error("output directory {0} is not empty (use force to overwrite)")]
    OutputNotEmpty(PathBuf),
    #[error("pairing requires at least 2 conditions, got {0}")]
    TooFewConditions(usize),
    #[error("dataset needs at least 1 scene")]
    NoScenes,
    #[error("malformed manifest: {0}")]
    BadManifest(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml error: {0}")]
    Toml(String),
    #[error(transparent)]
    Intrinsics(#[from] IntrinsicsError),
    #[error(transparent)]
    Image(#[from] imgcore::ImageError),
}

// ---------------------------------------------------------------------------
// small vector helpers
// ---------------------------------------------------------------------------

type Vec3 = [f32; 3];

fn dot(a: Vec3, b: Vec3) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: Vec3, s: f32) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn length(a: Vec3) -> f32 {
    dot(a, a).sqrt()
}

fn normalize(a: Vec3) -> Vec3 {
    let l = length(a);
    [a[0] / l, a[1] / l, a[2] / l]
}

// ---------------------------------------------------------------------------
// primitives and scene
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Sphere { center: Vec3, radius: f32 },
    /// Axis-aligned box.
    Box { min: Vec3, max: Vec3 },
}

impl Primitive {
    /// Nearest intersection parameter `t > t_min` along `origin + t·dir`,
    /// or None.
    fn intersect(&self, origin: Vec3, dir: Vec3, t_min: f32) -> Option<f32> {
        match *self {
            Primitive::Sphere { center, radius } => {
                let oc = sub(origin, center);
                let b = dot(oc, dir);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = -b - sq;
                if t0 > t_min {
                    return Some(t0);
                }
                let t1 = -b + sq;
                if t1 > t_min {
                    return Some(t1);
                }
                None
            }
            Primitive::Box { min, max } => {
                let mut t_enter = f32::NEG_INFINITY;
                let mut t_exit = f32::INFINITY;
                for axis in 0..3 {
                    if dir[axis].abs() < 1e-12 {
                        if origin[axis] < min[axis] || origin[axis] > max[axis] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[axis];
                    let mut t0 = (min[axis] - origin[axis]) * inv;
                    let mut t1 = (max[axis] - origin[axis]) * inv;
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    t_enter = t_enter.max(t0);
                    t_exit = t_exit.min(t1);
                    if t_enter > t_exit {
                        return None;
                    }
                }
                if t_enter > t_min {
                    Some(t_enter)
                } else if t_exit > t_min {
                    Some(t_exit)
                } else {
                    None
                }
            }
        }
    }

    fn normal_at(&self, p: Vec3) -> Vec3 {
        match *self {
            Primitive::Sphere { center, radius: _ } => normalize(sub(p, center)),
            Primitive::Box { min, max } => {
                // face with the smallest distance to the hit point
                let mut best_axis = 0;
                let mut best_sign = -1.0f32;
                let mut best_d = f32::INFINITY;
                for axis in 0..3 {
                    let d_min = (p[axis] - min[axis]).abs();
                    let d_max = (p[axis] - max[axis]).abs();
                    if d_min < best_d {
                        best_d = d_min;
                        best_axis = axis;
                        best_sign = -1.0;
                    }
                    if d_max < best_d {
                        best_d = d_max;
                        best_axis = axis;
                        best_sign = 1.0;
                    }
                }
                let mut n = [0.0; 3];
                n[best_axis] = best_sign;
                n
            }
        }
    }
}

/// Per-pixel geometry and material buffers plus the primitive list used for
/// shadow rays. Produced by ray-casting seeded procedural content or an
/// authored scene description.
#[derive(Debug, Clone)]
pub struct Scene {
    height: usize,
    width: usize,
    pub position: FloatBuffer,
    pub normal: FloatBuffer,
    pub albedo: FloatBuffer,
    pub specular_tint: FloatBuffer,
    pub shininess: FloatBuffer,
    primitives: Vec<Primitive>,
    camera_pos: Vec3,
}

/// Fixed pinhole camera: the tilt keeps every ray below the horizon so all
/// pixels land on geometry.
pub const CAMERA_POS: Vec3 = [0.0, 2.2, 3.5];
pub const CAMERA_LOOK_AT: Vec3 = [0.0, 0.5, 0.0];
const CAMERA_VFOV_DEG: f32 = 45.0;

impl Scene {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn camera_position(&self) -> Vec3 {
        self.camera_pos
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    fn get3(buf: &FloatBuffer, y: usize, x: usize) -> Vec3 {
        [buf.get(0, y, x), buf.get(1, y, x), buf.get(2, y, x)]
    }

    /// True when no primitive blocks the segment (or ray) from `p` toward
    /// the light.
    fn visible(&self, p: Vec3, n: Vec3, light_dir: Vec3, max_t: f32) -> bool {
        let origin = add(p, scale(n, 1e-3));
        for prim in &self.primitives {
            if let Some(t) = prim.intersect(origin, light_dir, 1e-4) {
                if t < max_t {
                    return false;
                }
            }
        }
        true
    }
}

// ---------------------------------------------------------------------------
// materials and procedural texturing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct SurfacePoint {
    albedo: Vec3,
    specular: Vec3,
    shininess: f32,
}

#[derive(Debug, Clone)]
enum Texture {
    Solid(Vec3),
    /// Two colors alternating in a world-space grid of the given cell size.
    Checker(Vec3, Vec3, f32),
    /// Two colors alternating in stripes along an axis.
    Stripes(Vec3, Vec3, f32, usize),
}

impl Texture {
    fn sample(&self, p: Vec3) -> Vec3 {
        match *self {
            Texture::Solid(c) => c,
            Texture::Checker(a, b, cell) => {
                let ix = (p[0] / cell).floor() as i64
                    + (p[1] / cell).floor() as i64
                    + (p[2] / cell).floor() as i64;
                if ix.rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
            Texture::Stripes(a, b, cell, axis) => {
                let ix = (p[axis] / cell).floor() as i64;
                if ix.rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Material {
    albedo: Texture,
    specular: Vec3,
    shininess: f32,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> Vec3 {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> Vec3 {
    hsv_to_rgb(rng.gen_range(0.0..1.0), rng.gen_range(0.2..0.9), rng.gen_range(0.3..0.95))
}

fn random_texture(rng: &mut ChaCha8Rng) -> Texture {
    let a = random_color(rng);
    let b = random_color(rng);
    match rng.gen_range(0..3u32) {
        0 => Texture::Solid(a),
        1 => Texture::Checker(a, b, rng.gen_range(0.25..0.8)),
        _ => Texture::Stripes(a, b, rng.gen_range(0.15..0.5), rng.gen_range(0..3)),
    }
}

fn random_material(rng: &mut ChaCha8Rng) -> Material {
    let spec_level = rng.gen_range(0.05..0.6f32);
    let specular = if rng.gen_bool(0.3) {
        scale(random_color(rng), spec_level)
    } else {
        [spec_level; 3]
    };
    Material {
        albedo: random_texture(rng),
        specular,
        shininess: rng.gen_range(8.0..128.0),
    }
}

// ---------------------------------------------------------------------------
// scene generation
// ---------------------------------------------------------------------------

/// Deterministic procedural scene: checkered ground plus 1–5 spheres/boxes
/// with procedural textures, ray-cast into per-pixel buffers.
pub fn generate_scene(seed: u64, resolution: usize) -> Scene {
    assert!(resolution > 0, "resolution must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let ground = Material {
        albedo: Texture::Checker(random_color(&mut rng), random_color(&mut rng), rng.gen_range(0.4..1.0)),
        specular: [rng.gen_range(0.02..0.25f32); 3],
        shininess: rng.gen_range(8.0..64.0),
    };

    let n_objects = rng.gen_range(1..=5usize);
    let mut primitives = Vec::with_capacity(n_objects);
    let mut materials = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        if rng.gen_bool(0.6) {
            let radius = rng.gen_range(0.35..0.75f32);
            let cx = rng.gen_range(-1.8..1.8f32);
            let cz = rng.gen_range(-1.8..1.2f32);
            let cy = if rng.gen_bool(0.8) { radius } else { radius + rng.gen_range(0.0..0.8f32) };
            primitives.push(Primitive::Sphere { center: [cx, cy, cz], radius });
        } else {
            let hx = rng.gen_range(0.25..0.6f32);
            let hy = rng.gen_range(0.25..0.6f32);
            let hz = rng.gen_range(0.25..0.6f32);
            let cx = rng.gen_range(-1.8..1.8f32);
            let cz = rng.gen_range(-1.8..1.2f32);
            primitives.push(Primitive::Box {
                min: [cx - hx, 0.0, cz - hz],
                max: [cx + hx, 2.0 * hy, cz + hz],
            });
        }
        materials.push(random_material(&mut rng));
    }

    rasterize(resolution, resolution, primitives, materials, ground)
}

fn rasterize(
    height: usize,
    width: usize,
    primitives: Vec<Primitive>,
    materials: Vec<Material>,
    ground: Material,
) -> Scene {
    let mut position = FloatBuffer::zeros(3, height, width);
    let mut normal = FloatBuffer::zeros(3, height, width);
    let mut albedo = FloatBuffer::zeros(3, height, width);
    let mut specular = FloatBuffer::zeros(3, height, width);
    let mut shininess = FloatBuffer::constant(1, height, width, 1.0);

    let forward = normalize(sub(CAMERA_LOOK_AT, CAMERA_POS));
    let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
    let up = cross(right, forward);
    let tan_half = (CAMERA_VFOV_DEG.to_radians() / 2.0).tan();
    let aspect = width as f32 / height as f32;

    for y in 0..height {
        for x in 0..width {
            let u = ((x as f32 + 0.5) / width as f32 * 2.0 - 1.0) * tan_half * aspect;
            let v = (1.0 - (y as f32 + 0.5) / height as f32 * 2.0) * tan_half;
            let dir = normalize(add(forward, add(scale(right, u), scale(up, v))));

            // nearest primitive, then the ground plane y = 0
            let mut best_t = f32::INFINITY;
            let mut best: Option<usize> = None;
            for (i, prim) in primitives.iter().enumerate() {
                if let Some(t) = prim.intersect(CAMERA_POS, dir, 1e-4) {
                    if t < best_t {
                        best_t = t;
                        best = Some(i);
                    }
                }
            }
            let mut hit_ground = false;
            if dir[1] < -1e-6 {
                let t = -CAMERA_POS[1] / dir[1];
                if t > 1e-4 && t < best_t {
                    best_t = t;
                    best = None;
                    hit_ground = true;
                }
            }
            if best.is_none() && !hit_ground {
                continue; // sky pixel: zero buffers (camera keeps this unreachable)
            }

            let p = add(CAMERA_POS, scale(dir, best_t));
            let (n, surf) = match best {
                Some(i) => {
                    let prim = &primitives[i];
                    let m = &materials[i];
                    (
                        prim.normal_at(p),
                        SurfacePoint {
                            albedo: m.albedo.sample(p),
                            specular: m.specular,
                            shininess: m.shininess,
                        },
                    )
                }
                None => (
                    [0.0, 1.0, 0.0],
                    SurfacePoint {
                        albedo: ground.albedo.sample(p),
                        specular: ground.specular,
                        shininess: ground.shininess,
                    },
                ),
            };
            for c in 0..3 {
                position.set(c, y, x, p[c]);
                normal.set(c, y, x, n[c]);
                albedo.set(c, y, x, surf.albedo[c].clamp(0.0, 1.0));
                specular.set(c, y, x, surf.specular[c].clamp(0.0, 1.0));
            }
            shininess.set(0, y, x, surf.shininess.max(1.0));
        }
    }

    Scene {
        height,
        width,
        position,
        normal,
        albedo,
        specular_tint: specular,
        shininess,
        primitives,
        camera_pos: CAMERA_POS,
    }
}

// ---------------------------------------------------------------------------
// lights
// ---------------------------------------------------------------------------

/// One analytic light. `direction` is the unit vector along which light
/// travels (a sun shining straight down has direction `(0,−1,0)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum LightSpec {
    Point { position: [f32; 3], color: [f32; 3], intensity: f32 },
    Directional { direction: [f32; 3], color: [f32; 3], intensity: f32 },
    Ambient { color: [f32; 3], intensity: f32 },
}

impl LightSpec {
    pub fn color(&self) -> Vec3 {
        match self {
            LightSpec::Point { color, .. }
            | LightSpec::Directional { color, .. }
            | LightSpec::Ambient { color, .. } => *color,
        }
    }

    pub fn intensity(&self) -> f32 {
        match self {
            LightSpec::Point { intensity, .. }
            | LightSpec::Directional { intensity, .. }
            | LightSpec::Ambient { intensity, .. } => *intensity,
        }
    }

    /// Scale the light's intensity (used by tests and lighting sweeps).
    pub fn scaled(&self, factor: f32) -> LightSpec {
        let mut out = self.clone();
        match &mut out {
            LightSpec::Point { intensity, .. }
            | LightSpec::Directional { intensity, .. }
            | LightSpec::Ambient { intensity, .. } => *intensity *= factor,
        }
        out
    }

    /// Check invariants and normalize the direction of directional lights.
    pub fn normalized(self) -> Result<LightSpec, SceneError> {
        let check_color = |c: Vec3, i: f32| -> Result<(), SceneError> {
            if !c.iter().all(|v| v.is_finite() && *v >= 0.0) {
                return Err(SceneError::BadLight(format!("color {c:?} must be finite and ≥ 0")));
            }
            if !i.is_finite() || i < 0.0 {
                return Err(SceneError::BadLight(format!("intensity {i} must be finite and ≥ 0")));
            }
            Ok(())
        };
        match self {
            LightSpec::Point { position, color, intensity } => {
                check_color(color, intensity)?;
                if !position.iter().all(|v| v.is_finite()) {
                    return Err(SceneError::BadLight("non-finite position".into()));
                }
                Ok(LightSpec::Point { position, color, intensity })
            }
            LightSpec::Directional { direction, color, intensity } => {
                check_color(color, intensity)?;
                let len = length(direction);
                if !len.is_finite() || len < 1e-6 {
                    return Err(SceneError::BadLight("direction must be non-zero".into()));
                }
                Ok(LightSpec::Directional { direction: normalize(direction), color, intensity })
            }
            LightSpec::Ambient { color, intensity } => {
                check_color(color, intensity)?;
                Ok(LightSpec::Ambient { color, intensity })
            }
        }
    }
}

/// The five authored lighting styles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightingPreset {
    CoolSideFlash,
    WarmOverheadFlash,
    DimOverheadSpot,
    SoftFrontalSun,
    WarmInteriorSun,
}

impl LightingPreset {
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "cool_side_flash" => Self::CoolSideFlash,
            "warm_overhead_flash" => Self::WarmOverheadFlash,
            "dim_overhead_spot" => Self::DimOverheadSpot,
            "soft_frontal_sun" => Self::SoftFrontalSun,
            "warm_interior_sun" => Self::WarmInteriorSun,
            _ => return None,
        })
    }

    pub const ALL: [(&'static str, LightingPreset); 5] = [
        ("cool_side_flash", Self::CoolSideFlash),
        ("warm_overhead_flash", Self::WarmOverheadFlash),
        ("dim_overhead_spot", Self::DimOverheadSpot),
        ("soft_frontal_sun", Self::SoftFrontalSun),
        ("warm_interior_sun", Self::WarmInteriorSun),
    ];
}

pub fn preset_lighting(preset: LightingPreset) -> Vec<LightSpec> {
    match preset {
        LightingPreset::CoolSideFlash => vec![LightSpec::Point {
            position: [2.6, 1.8, 0.6],
            color: [0.75, 0.88, 1.0],
            intensity: 9.0,
        }],
        LightingPreset::WarmOverheadFlash => vec![LightSpec::Point {
            position: [0.0, 3.6, 0.2],
            color: [1.0, 0.85, 0.7],
            intensity: 12.0,
        }],
        LightingPreset::DimOverheadSpot => vec![
            LightSpec::Point { position: [0.0, 3.0, 0.0], color: [1.0, 1.0, 1.0], intensity: 3.5 },
            LightSpec::Ambient { color: [1.0, 1.0, 1.0], intensity: 0.03 },
        ],
        LightingPreset::SoftFrontalSun => vec![LightSpec::Directional {
            direction: normalize([0.0, -0.45, -0.89]),
            color: [1.0, 0.95, 0.85],
            intensity: 1.0,
        }],
        LightingPreset::WarmInteriorSun => vec![
            LightSpec::Directional {
                direction: normalize([-0.62, -0.35, -0.70]),
                color: [1.0, 0.76, 0.52],
                intensity: 1.3,
            },
            LightSpec::Ambient { color: [1.0, 0.85, 0.7], intensity: 0.12 },
        ],
    }
}

/// Parameter ranges for random lighting draws, exposed so tests can assert
/// the range contract.
pub mod light_ranges {
    pub const POINT_XZ: [f32; 2] = [-3.0, 3.0];
    pub const POINT_Y: [f32; 2] = [1.5, 4.0];
    pub const POINT_INTENSITY: [f32; 2] = [3.0, 12.0];
    pub const DIR_ELEVATION_DEG: [f32; 2] = [25.0, 80.0];
    pub const DIR_INTENSITY: [f32; 2] = [0.4, 1.6];
    pub const AMBIENT_INTENSITY: [f32; 2] = [0.05, 0.30];
}

/// 1–3 random lights; deterministic per seed, always at least one
/// non-ambient light.
pub fn sample_lighting(seed: u64) -> Vec<LightSpec> {
    use light_ranges::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=3usize);
    let mut lights = Vec::with_capacity(n);
    for _ in 0..n {
        // warm–cool blend
        let t = rng.gen_range(0.0..1.0f32);
        let warm = [1.0, 0.82, 0.65];
        let cool = [0.75, 0.86, 1.0];
        let color = [
            warm[0] + (cool[0] - warm[0]) * t,
            warm[1] + (cool[1] - warm[1]) * t,
            warm[2] + (cool[2] - warm[2]) * t,
        ];
        let kind = rng.gen_range(0.0..1.0f32);
        if kind < 0.45 {
            lights.push(LightSpec::Point {
                position: [
                    rng.gen_range(POINT_XZ[0]..=POINT_XZ[1]),
                    rng.gen_range(POINT_Y[0]..=POINT_Y[1]),
                    rng.gen_range(POINT_XZ[0]..=POINT_XZ[1]),
                ],
                color,
                intensity: rng.gen_range(POINT_INTENSITY[0]..=POINT_INTENSITY[1]),
            });
        } else if kind < 0.80 {
            let azimuth = rng.gen_range(0.0..std::f32::consts::TAU);
            let elevation = rng
                .gen_range(DIR_ELEVATION_DEG[0]..=DIR_ELEVATION_DEG[1])
                .to_radians();
            lights.push(LightSpec::Directional {
                direction: normalize([
                    elevation.cos() * azimuth.cos(),
                    -elevation.sin(),
                    elevation.cos() * azimuth.sin(),
                ]),
                color,
                intensity: rng.gen_range(DIR_INTENSITY[0]..=DIR_INTENSITY[1]),
            });
        } else {
            lights.push(LightSpec::Ambient {
                color,
                intensity: rng.gen_range(AMBIENT_INTENSITY[0]..=AMBIENT_INTENSITY[1]),
            });
        }
    }
    if lights.iter().all(|l| matches!(l, LightSpec::Ambient { .. })) {
        lights[0] = LightSpec::Point {
            position: [
                rng.gen_range(POINT_XZ[0]..=POINT_XZ[1]),
                rng.gen_range(POINT_Y[0]..=POINT_Y[1]),
                rng.gen_range(POINT_XZ[0]..=POINT_XZ[1]),
            ],
            color: [1.0, 0.95, 0.9],
            intensity: rng.gen_range(POINT_INTENSITY[0]..=POINT_INTENSITY[1]),
        };
    }
    lights
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

/// Emit per-mechanism passes for the scene under the given lights:
/// `diffuse_color` is the albedo, `diffuse_direct` sums shadowed Lambertian
/// contributions, the ambient term lands in `diffuse_indirect`, and
/// `glossy_direct` carries the Blinn-Phong lobe tinted by `glossy_color`.
/// Transmission, volume, and emission stay zero.
pub fn render_passes(scene: &Scene, lights: &[LightSpec]) -> Result<RenderPasses, SceneError> {
    if lights.is_empty() {
        return Err(SceneError::NoLights);
    }
    let (h, w) = (scene.height, scene.width);
    let mut passes = RenderPasses::zeros(h, w);
    passes.diffuse_color = scene.albedo.clone();
    passes.glossy_color = scene.specular_tint.clone();

    for y in 0..h {
        for x in 0..w {
            let p = Scene::get3(&scene.position, y, x);
            let n = Scene::get3(&scene.normal, y, x);
            let v = normalize(sub(scene.camera_pos, p));
            let shin = scene.shininess.get(0, y, x);

            let mut diffuse = [0.0f32; 3];
            let mut indirect = [0.0f32; 3];
            let mut glossy = [0.0f32; 3];
            for light in lights {
                match light {
                    LightSpec::Ambient { color, intensity } => {
                        for c in 0..3 {
                            indirect[c] += color[c] * intensity;
                        }
                    }
                    LightSpec::Point { position, color, intensity } => {
                        let to_light = sub(*position, p);
                        let dist = length(to_light);
                        let l = scale(to_light, 1.0 / dist);
                        let ndotl = dot(n, l);
                        if ndotl <= 0.0 {
                            continue;
                        }
                        if !scene.visible(p, n, l, dist - 1e-3) {
                            continue;
                        }
                        let atten = 1.0 / (dist * dist);
                        let half = normalize(add(l, v));
                        let spec = dot(n, half).max(0.0).powf(shin);
                        for c in 0..3 {
                            let radiance = color[c] * intensity * atten;
                            diffuse[c] += ndotl * radiance;
                            glossy[c] += spec * radiance;
                        }
                    }
                    LightSpec::Directional { direction, color, intensity } => {
                        let l = scale(*direction, -1.0);
                        let ndotl = dot(n, l);
                        if ndotl <= 0.0 {
                            continue;
                        }
                        if !scene.visible(p, n, l, f32::INFINITY) {
                            continue;
                        }
                        let half = normalize(add(l, v));
                        let spec = dot(n, half).max(0.0).powf(shin);
                        for c in 0..3 {
                            let radiance = color[c] * intensity;
                            diffuse[c] += ndotl * radiance;
                            glossy[c] += spec * radiance;
                        }
                    }
                }
            }
            for c in 0..3 {
                passes.diffuse_direct.set(c, y, x, diffuse[c]);
                passes.diffuse_indirect.set(c, y, x, indirect[c]);
                passes.glossy_direct.set(c, y, x, glossy[c]);
            }
        }
    }
    Ok(passes)
}

/// Reference beauty render: accumulates `albedo·diffuse + tint·specular`
/// per light directly, independent of the pass/composition path. The
/// composed intrinsics must reproduce this within float tolerance.
pub fn render_beauty(scene: &Scene, lights: &[LightSpec]) -> Result<FloatBuffer, SceneError> {
    if lights.is_empty() {
        return Err(SceneError::NoLights);
    }
    let (h, w) = (scene.height, scene.width);
    let mut beauty = FloatBuffer::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let p = Scene::get3(&scene.position, y, x);
            let n = Scene::get3(&scene.normal, y, x);
            let v = normalize(sub(scene.camera_pos, p));
            let shin = scene.shininess.get(0, y, x);
            let alb = Scene::get3(&scene.albedo, y, x);
            let tint = Scene::get3(&scene.specular_tint, y, x);
            let mut out = [0.0f32; 3];
            for light in lights {
                match light {
                    LightSpec::Ambient { color, intensity } => {
                        for c in 0..3 {
                            out[c] += alb[c] * color[c] * intensity;
                        }
                    }
                    LightSpec::Point { position, color, intensity } => {
                        let to_light = sub(*position, p);
                        let dist = length(to_light);
                        let l = scale(to_light, 1.0 / dist);
                        let ndotl = dot(n, l);
                        if ndotl <= 0.0 || !scene.visible(p, n, l, dist - 1e-3) {
                            continue;
                        }
                        let atten = 1.0 / (dist * dist);
                        let half = normalize(add(l, v));
                        let spec = dot(n, half).max(0.0).powf(shin);
                        for c in 0..3 {
                            let radiance = color[c] * intensity * atten;
                            out[c] += alb[c] * ndotl * radiance + tint[c] * spec * radiance;
                        }
                    }
                    LightSpec::Directional { direction, color, intensity } => {
                        let l = scale(*direction, -1.0);
                        let ndotl = dot(n, l);
                        if ndotl <= 0.0 || !scene.visible(p, n, l, f32::INFINITY) {
                            continue;
                        }
                        let half = normalize(add(l, v));
                        let spec = dot(n, half).max(0.0).powf(shin);
                        for c in 0..3 {
                            let radiance = color[c] * intensity;
                            out[c] += alb[c] * ndotl * radiance + tint[c] * spec * radiance;
                        }
                    }
                }
            }
            for c in 0..3 {
                beauty.set(c, y, x, out[c]);
            }
        }
    }
    Ok(beauty)
}

/// Render one condition to a display image: compose, clip, gamma-encode.
pub fn render_condition_image(
    scene: &Scene,
    lights: &[LightSpec],
) -> Result<ImageRgb, SceneError> {
    let passes = render_passes(scene, lights)?;
    let triplet = passes_to_intrinsics(&passes)?;
    let linear = compose_image(&triplet)?;
    let clipped: Vec<f32> = linear.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    let clipped = ImageRgb::new(scene.height, scene.width, clipped, ColorSpace::Linear);
    Ok(imgcore::linear_to_srgb(&clipped)?)
}

/// A source/target training pair for one scene: display images for both
/// conditions plus the target's rescaled intrinsics.
#[derive(Debug, Clone)]
pub struct RenderedPair {
    pub source: ImageRgb,
    pub target: ImageRgb,
    pub target_triplet: IntrinsicTriplet,
}

/// Render a source/target pair of the same scene. The target triplet is
/// percentile-rescaled and ready for conditioning assembly.
pub fn render_pair(
    scene: &Scene,
    lights_src: &[LightSpec],
    lights_tgt: &[LightSpec],
) -> Result<RenderedPair, SceneError> {
    let source = render_condition_image(scene, lights_src)?;
    let passes_tgt = render_passes(scene, lights_tgt)?;
    let triplet_tgt = passes_to_intrinsics(&passes_tgt)?;
    let linear = compose_image(&triplet_tgt)?;
    let clipped: Vec<f32> = linear.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    let target =
        imgcore::linear_to_srgb(&ImageRgb::new(scene.height, scene.width, clipped, ColorSpace::Linear))?;
    let (shading, residual) =
        percentile_rescale(&triplet_tgt.shading, &triplet_tgt.residual, 0.98, 1e-4)?;
    Ok(RenderedPair {
        source,
        target,
        target_triplet: IntrinsicTriplet { albedo: triplet_tgt.albedo, shading, residual },
    })
}

// ---------------------------------------------------------------------------
// declarative scene / lights files
// ---------------------------------------------------------------------------

fn default_resolution() -> usize {
    128
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    pub albedo: [f32; 3],
    #[serde(default = "default_specular")]
    pub specular: [f32; 3],
    #[serde(default = "default_shininess")]
    pub shininess: f32,
}

fn default_specular() -> [f32; 3] {
    [0.2, 0.2, 0.2]
}

fn default_shininess() -> f32 {
    32.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ObjectSpec {
    Sphere { center: [f32; 3], radius: f32, material: MaterialSpec },
    Box { min: [f32; 3], max: [f32; 3], material: MaterialSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundSpec {
    pub albedo_a: [f32; 3],
    pub albedo_b: [f32; 3],
    #[serde(default = "default_cell")]
    pub cell: f32,
    #[serde(default = "default_specular")]
    pub specular: [f32; 3],
    #[serde(default = "default_shininess")]
    pub shininess: f32,
}

fn default_cell() -> f32 {
    0.6
}

impl Default for GroundSpec {
    fn default() -> Self {
        Self {
            albedo_a: [0.85, 0.85, 0.85],
            albedo_b: [0.25, 0.25, 0.3],
            cell: default_cell(),
            specular: default_specular(),
            shininess: default_shininess(),
        }
    }
}

/// Declarative scene description: either a procedural `seed` or a list of
/// authored objects over a configurable ground.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFileSpec {
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub ground: Option<GroundSpec>,
}

pub fn scene_from_spec(spec: &SceneFileSpec) -> Result<Scene, SceneError> {
    if spec.resolution == 0 {
        return Err(SceneError::BadSceneFile("resolution must be positive".into()));
    }
    if spec.objects.is_empty() {
        let seed = spec
            .seed
            .ok_or_else(|| SceneError::BadSceneFile("need a seed or at least one object".into()))?;
        return Ok(generate_scene(seed, spec.resolution));
    }
    let mut primitives = Vec::new();
    let mut materials = Vec::new();
    for obj in &spec.objects {
        let (prim, mat) = match obj {
            ObjectSpec::Sphere { center, radius, material } => {
                if *radius <= 0.0 {
                    return Err(SceneError::BadSceneFile("sphere radius must be positive".into()));
                }
                (Primitive::Sphere { center: *center, radius: *radius }, material)
            }
            ObjectSpec::Box { min, max, material } => {
                if (0..3).any(|a| min[a] >= max[a]) {
                    return Err(SceneError::BadSceneFile("box min must be below max".into()));
                }
                (Primitive::Box { min: *min, max: *max }, material)
            }
        };
        primitives.push(prim);
        materials.push(Material {
            albedo: Texture::Solid(mat.albedo),
            specular: mat.specular,
            shininess: mat.shininess.max(1.0),
        });
    }
    let g = spec.ground.clone().unwrap_or_default();
    let ground = Material {
        albedo: Texture::Checker(g.albedo_a, g.albedo_b, g.cell.max(1e-3)),
        specular: g.specular,
        shininess: g.shininess.max(1.0),
    };
    Ok(rasterize(spec.resolution, spec.resolution, primitives, materials, ground))
}

pub fn load_scene_file(path: &Path) -> Result<Scene, SceneError> {
    let text = fs::read_to_string(path)?;
    let spec: SceneFileSpec = toml::from_str(&text).map_err(|e| SceneError::Toml(e.to_string()))?;
    scene_from_spec(&spec)
}

/// Declarative lighting: exactly one of `preset`, `lights`, or `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightsFileSpec {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub lights: Vec<LightSpec>,
    #[serde(default)]
    pub seed: Option<u64>,
}

pub fn lights_from_spec(spec: &LightsFileSpec) -> Result<Vec<LightSpec>, SceneError> {
    let sources =
        spec.preset.is_some() as usize + !spec.lights.is_empty() as usize + spec.seed.is_some() as usize;
    if sources != 1 {
        return Err(SceneError::BadLightsFile(
            "specify exactly one of preset, lights, or seed".into(),
        ));
    }
    if let Some(name) = &spec.preset {
        let preset = LightingPreset::from_name(name).ok_or_else(|| {
            SceneError::BadLightsFile(format!(
                "unknown preset {name:?}; known: {:?}",
                LightingPreset::ALL.map(|(n, _)| n)
            ))
        })?;
        return Ok(preset_lighting(preset));
    }
    if let Some(seed) = spec.seed {
        return Ok(sample_lighting(seed));
    }
    spec.lights.iter().cloned().map(LightSpec::normalized).collect()
}

pub fn load_lights_file(path: &Path) -> Result<Vec<LightSpec>, SceneError> {
    let text = fs::read_to_string(path)?;
    let spec: LightsFileSpec = toml::from_str(&text).map_err(|e| SceneError::Toml(e.to_string()))?;
    lights_from_spec(&spec)
}

// ---------------------------------------------------------------------------
// dataset generation and loading
// ---------------------------------------------------------------------------

pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_MAGIC: &str = "pixl-dataset 1";

#[derive(Debug, Clone)]
pub struct DatasetParams {
    pub scenes: usize,
    pub conditions: usize,
    pub seed: u64,
    pub resolution: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub seed: u64,
    pub resolution: usize,
    pub conditions: usize,
    pub scene_ids: Vec<String>,
}

impl Dataset {
    pub fn scene_dir(&self, scene: usize) -> PathBuf {
        self.root.join("scenes").join(&self.scene_ids[scene])
    }

    pub fn load_image(&self, scene: usize, cond: usize) -> Result<ImageRgb, SceneError> {
        Ok(imgcore::load_png(&self.scene_dir(scene).join(format!("cond_{cond}.png")))?)
    }

    pub fn load_albedo(&self, scene: usize) -> Result<FloatBuffer, SceneError> {
        Ok(imgcore::load_pfm(&self.scene_dir(scene).join("albedo.pfm"))?)
    }

    /// Rescaled target triplet of one condition (albedo shared per scene).
    pub fn load_triplet(&self, scene: usize, cond: usize) -> Result<IntrinsicTriplet, SceneError> {
        let dir = self.scene_dir(scene);
        Ok(IntrinsicTriplet {
            albedo: imgcore::load_pfm(&dir.join("albedo.pfm"))?,
            shading: imgcore::load_pfm(&dir.join(format!("cond_{cond}.shading.pfm")))?,
            residual: imgcore::load_pfm(&dir.join(format!("cond_{cond}.residual.pfm")))?,
        })
    }

    pub fn conditioning(&self, scene: usize, cond: usize) -> Result<ConditioningStack, SceneError> {
        Ok(build_conditioning(&self.load_triplet(scene, cond)?)?)
    }
}

/// Generate `scenes × conditions` renders with intrinsics and a manifest.
/// Deterministic per seed; byte-identical across runs.
pub fn generate_dataset(
    params: &DatasetParams,
    out: &Path,
    force: bool,
) -> Result<Dataset, SceneError> {
    if params.scenes == 0 {
        return Err(SceneError::NoScenes);
    }
    if params.conditions < 2 {
        return Err(SceneError::TooFewConditions(params.conditions));
    }
    if out.exists() && out.read_dir()?.next().is_some() {
        if !force {
            return Err(SceneError::OutputNotEmpty(out.to_path_buf()));
        }
        fs::remove_dir_all(out)?;
    }
    fs::create_dir_all(out.join("scenes"))?;

    let stream = RngStream::new(params.seed);
    let mut scene_ids = Vec::with_capacity(params.scenes);
    for s in 0..params.scenes {
        let id = format!("scene_{s:03}");
        let dir = out.join("scenes").join(&id);
        fs::create_dir_all(&dir)?;
        let scene_seed: u64 = stream.substream(s as u64, lane::SCENE).gen();
        let scene = generate_scene(scene_seed, params.resolution);
        for k in 0..params.conditions {
            let light_seed: u64 = stream.substream(s as u64, lane::LIGHTS_BASE + k as u64).gen();
            let lights = sample_lighting(light_seed);
            let passes = render_passes(&scene, &lights)?;
            let triplet = passes_to_intrinsics(&passes)?;
            let linear = compose_image(&triplet)?;
            let clipped: Vec<f32> = linear.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect();
            let image = imgcore::linear_to_srgb(&ImageRgb::new(
                params.resolution,
                params.resolution,
                clipped,
                ColorSpace::Linear,
            ))?;
            imgcore::save_png(&image, &dir.join(format!("cond_{k}.png")))?;
            if k == 0 {
                imgcore::save_pfm(&triplet.albedo, &dir.join("albedo.pfm"))?;
            }
            let (shading, residual) =
                percentile_rescale(&triplet.shading, &triplet.residual, 0.98, 1e-4)?;
            imgcore::save_pfm(&shading, &dir.join(format!("cond_{k}.shading.pfm")))?;
            imgcore::save_pfm(&residual, &dir.join(format!("cond_{k}.residual.pfm")))?;
        }
        scene_ids.push(id);
    }

    let mut manifest = String::new();
    manifest.push_str(MANIFEST_MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("seed {}\n", params.seed));
    manifest.push_str(&format!("resolution {}\n", params.resolution));
    manifest.push_str(&format!("conditions {}\n", params.conditions));
    for id in &scene_ids {
        manifest.push_str(&format!("scene {id}\n"));
    }
    fs::write(out.join(MANIFEST_NAME), manifest)?;

    Ok(Dataset {
        root: out.to_path_buf(),
        seed: params.seed,
        resolution: params.resolution,
        conditions: params.conditions,
        scene_ids,
    })
}

pub fn load_dataset(root: &Path) -> Result<Dataset, SceneError> {
    let text = fs::read_to_string(root.join(MANIFEST_NAME))?;
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != MANIFEST_MAGIC {
        return Err(SceneError::BadManifest(format!("unexpected header {magic:?}")));
    }
    let mut seed = None;
    let mut resolution = None;
    let mut conditions = None;
    let mut scene_ids = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| SceneError::BadManifest(format!("bad line {line:?}")))?;
        match key {
            "seed" => seed = Some(value.parse().map_err(|_| bad_field("seed", value))?),
            "resolution" => {
                resolution = Some(value.parse().map_err(|_| bad_field("resolution", value))?)
            }
            "conditions" => {
                conditions = Some(value.parse().map_err(|_| bad_field("conditions", value))?)
            }
            "scene" => scene_ids.push(value.to_string()),
            other => return Err(SceneError::BadManifest(format!("unknown key {other:?}"))),
        }
    }
    let dataset = Dataset {
        root: root.to_path_buf(),
        seed: seed.ok_or_else(|| SceneError::BadManifest("missing seed".into()))?,
        resolution: resolution.ok_or_else(|| SceneError::BadManifest("missing resolution".into()))?,
        conditions: conditions.ok_or_else(|| SceneError::BadManifest("missing conditions".into()))?,
        scene_ids,
    };
    if dataset.scene_ids.is_empty() {
        return Err(SceneError::BadManifest("no scenes listed".into()));
    }
    if dataset.conditions < 2 {
        return Err(SceneError::TooFewConditions(dataset.conditions));
    }
    Ok(dataset)
}

fn bad_field(key: &str, value: &str) -> SceneError {
    SceneError::BadManifest(format!("bad {key} value {value:?}"))
}
