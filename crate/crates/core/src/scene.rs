//! Synthetic cross-view sites.
//!
//! A site is an analytic heightfield (base plane, Gaussian bumps and a box
//! landmark at the origin) observed by three capture patterns: a ground
//! walk-around, a triple-camera aerial rig on a descending helix, and nadir
//! satellite views on a jittered grid. Depth is rendered exactly against the
//! heightfield as z-depth (distance along the principal axis).

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    look_at_rotation, nadir_rotation, rotation_to_quat, CameraIntrinsics, GeometryError, Pose, Rotation3,
    UnitQuaternion, Vec3,
};
use crate::raster::{write_atomic, DepthMap, Image3, RasterError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("manifest parse error at `{path}`: {message}")]
    ManifestParse { path: String, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ground,
    Aerial,
    Satellite,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Ground, Modality::Aerial, Modality::Satellite];

    /// Altitude-above-ground band in meters.
    pub fn altitude_band(self) -> (f64, f64) {
        match self {
            Modality::Ground => (5.0, 80.0),
            Modality::Aerial => (200.0, 800.0),
            Modality::Satellite => (1000.0, 2000.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ground => "ground",
            Modality::Aerial => "aerial",
            Modality::Satellite => "satellite",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ground" | "g" | "G" => Ok(Modality::Ground),
            "aerial" | "a" | "A" => Ok(Modality::Aerial),
            "satellite" | "s" | "S" | "sat" => Ok(Modality::Satellite),
            other => Err(SceneError::InvalidInput(format!("unknown modality {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Heightfield

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
    pub sigma: f64,
}

impl Bump {
    fn eval(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.x, y - self.y);
        self.amplitude * (-(dx * dx + dy * dy) / (2.0 * self.sigma * self.sigma)).exp()
    }

    fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let s2 = self.sigma * self.sigma;
        let g = self.eval(x, y) / s2;
        (-(x - self.x) * g, -(y - self.y) * g)
    }

    /// Largest slope of the Gaussian: `A/σ · e^{-1/2}`.
    fn max_slope(&self) -> f64 {
        self.amplitude / self.sigma * (-0.5f64).exp()
    }
}

/// Axis-aligned box centered on the origin, raised on top of the terrain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub half_x: f64,
    pub half_y: f64,
    pub height: f64,
}

impl Landmark {
    fn contains(&self, x: f64, y: f64) -> bool {
        self.height > 0.0 && x.abs() <= self.half_x && y.abs() <= self.half_y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub extent: f64,
    pub base: f64,
    pub bumps: usize,
    pub amplitude: (f64, f64),
    pub sigma: (f64, f64),
    pub landmark: Landmark,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: 1600.0,
            base: 10.0,
            bumps: 6,
            amplitude: (5.0, 30.0),
            sigma: (80.0, 220.0),
            landmark: Landmark { half_x: 20.0, half_y: 15.0, height: 45.0 },
        }
    }
}

/// Analytic terrain over a square of side `extent` centered at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightfieldScene {
    pub extent: f64,
    pub base: f64,
    pub bumps: Vec<Bump>,
    pub landmark: Landmark,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    Terrain,
    LandmarkTop,
    LandmarkWall,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Distance along the unit ray direction.
    pub t: f64,
    pub point: Vec3,
    pub surface: Surface,
}

impl HeightfieldScene {
    pub fn generate(config: &SceneConfig, seed: u64) -> Result<Self, SceneError> {
        if !(config.extent > 0.0) || !(config.base >= 0.0) {
            return Err(SceneError::InvalidInput("scene extent must be > 0 and base ≥ 0".into()));
        }
        let (a0, a1) = config.amplitude;
        let (s0, s1) = config.sigma;
        if !(a0 >= 0.0 && a1 >= a0 && s0 > 0.0 && s1 >= s0) {
            return Err(SceneError::InvalidInput("bump amplitude/sigma ranges are invalid".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = config.extent / 2.0;
        let bumps = (0..config.bumps)
            .map(|_| Bump {
                x: rng.random_range(-half..half),
                y: rng.random_range(-half..half),
                amplitude: if a1 > a0 { rng.random_range(a0..a1) } else { a0 },
                sigma: if s1 > s0 { rng.random_range(s0..s1) } else { s0 },
            })
            .collect();
        Ok(Self { extent: config.extent, base: config.base, bumps, landmark: config.landmark, seed })
    }

    /// Constant-height plane, optionally with a landmark box.
    pub fn flat(extent: f64, base: f64, landmark: Option<Landmark>) -> Self {
        Self {
            extent,
            base,
            bumps: Vec::new(),
            landmark: landmark.unwrap_or(Landmark { half_x: 0.0, half_y: 0.0, height: 0.0 }),
            seed: 0,
        }
    }

    pub fn half_extent(&self) -> f64 {
        self.extent / 2.0
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let h = self.half_extent();
        x.abs() <= h && y.abs() <= h
    }

    /// Terrain without the landmark.
    pub fn smooth_height(&self, x: f64, y: f64) -> f64 {
        self.base + self.bumps.iter().map(|b| b.eval(x, y)).sum::<f64>()
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        let h = self.smooth_height(x, y);
        if self.landmark.contains(x, y) {
            h + self.landmark.height
        } else {
            h
        }
    }

    fn smooth_gradient(&self, x: f64, y: f64) -> (f64, f64) {
        self.bumps.iter().fold((0.0, 0.0), |(gx, gy), b| {
            let (bx, by) = b.gradient(x, y);
            (gx + bx, gy + by)
        })
    }

    /// Upward unit normal of the smooth terrain.
    pub fn normal(&self, x: f64, y: f64) -> Vec3 {
        let (gx, gy) = self.smooth_gradient(x, y);
        Vec3::new(-gx, -gy, 1.0).normalize()
    }

    fn lipschitz(&self) -> f64 {
        self.bumps.iter().map(Bump::max_slope).sum()
    }

    pub fn max_height(&self) -> f64 {
        self.base + self.bumps.iter().map(|b| b.amplitude).sum::<f64>() + self.landmark.height.max(0.0)
    }

    pub fn landmark_center(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.smooth_height(0.0, 0.0) + self.landmark.height / 2.0)
    }

    /// Camera center `altitude_agl` meters above the terrain at `(x, y)`.
    pub fn point_above(&self, x: f64, y: f64, altitude_agl: f64) -> Vec3 {
        Vec3::new(x, y, self.height(x, y) + altitude_agl)
    }

    /// First intersection of the ray `origin + t·dir` (`dir` unit length)
    /// with the terrain inside the extent.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<RayHit> {
        let h = self.half_extent();
        let (t_in, t_out) = slab_xy(origin, dir, -h, h, -h, h)?;
        let t_in = t_in.max(0.0);
        if t_out <= t_in {
            return None;
        }

        let lm = self.landmark;
        let mut cuts = vec![t_in, t_out];
        let box_span = if lm.height > 0.0 {
            slab_xy(origin, dir, -lm.half_x, lm.half_x, -lm.half_y, lm.half_y)
        } else {
            None
        };
        if let Some((b0, b1)) = box_span {
            for c in [b0, b1] {
                if c > t_in && c < t_out {
                    cuts.push(c);
                }
            }
        }
        cuts.sort_by(f64::total_cmp);

        let lipschitz = self.lipschitz();
        let horiz = (dir.x * dir.x + dir.y * dir.y).sqrt();
        let descent = (-dir.z).max(0.0);
        let denom = lipschitz * horiz + descent;
        let z_ceiling = self.max_height();

        for seg in cuts.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            if b - a <= 0.0 {
                continue;
            }
            let mid = origin + dir * (0.5 * (a + b));
            let on_box = box_span.is_some() && lm.contains(mid.x, mid.y);
            let lift = if on_box { lm.height } else { 0.0 };
            let gap = |t: f64| {
                let p = origin + dir * t;
                p.z - (self.smooth_height(p.x, p.y) + lift)
            };

            let entry_gap = gap(a);
            if entry_gap < 0.0 {
                // Entered the box footprint below its top: a wall.
                let point = origin + dir * a;
                let surface = if on_box { Surface::LandmarkWall } else { Surface::Terrain };
                return Some(RayHit { t: a, point, surface });
            }
            if denom <= 0.0 {
                // Gap can only grow along this segment.
                if dir.z >= 0.0 && origin.z + dir.z * b > z_ceiling {
                    return None;
                }
                continue;
            }

            let mut t = a;
            let mut g = entry_gap;
            loop {
                if g < 1e-7 {
                    return Some(self.hit_at(origin, dir, t, on_box));
                }
                if dir.z >= 0.0 && origin.z + dir.z * t > z_ceiling {
                    return None;
                }
                let step = (g / denom).max(0.25 + 0.004 * t);
                let next = (t + step).min(b);
                let gn = gap(next);
                if gn < 0.0 {
                    let t_hit = bisect(&gap, t, next);
                    return Some(self.hit_at(origin, dir, t_hit, on_box));
                }
                if next >= b {
                    break;
                }
                t = next;
                g = gn;
            }
        }
        None
    }

    fn hit_at(&self, origin: &Vec3, dir: &Vec3, t: f64, on_box: bool) -> RayHit {
        let surface = if on_box { Surface::LandmarkTop } else { Surface::Terrain };
        RayHit { t, point: origin + dir * t, surface }
    }
}

/// Returns the last parameter with a nonnegative gap.
fn bisect(gap: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gap(mid) < 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Parameter interval where the ray's xy projection lies in the rectangle.
fn slab_xy(origin: &Vec3, dir: &Vec3, x0: f64, x1: f64, y0: f64, y1: f64) -> Option<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (o, d, min, max) in [(origin.x, dir.x, x0, x1), (origin.y, dir.y, y0, y1)] {
        if d == 0.0 {
            if o < min || o > max {
                return None;
            }
        } else {
            let (ta, tb) = ((min - o) / d, (max - o) / d);
            lo = lo.max(ta.min(tb));
            hi = hi.min(ta.max(tb));
        }
    }
    (hi >= lo).then_some((lo, hi))
}

// ---------------------------------------------------------------------------
// Rendering

fn check_camera(scene: &HeightfieldScene, pose: &Pose) -> Result<Vec3, SceneError> {
    let c = pose.center();
    if c.z <= scene.height(c.x, c.y) {
        return Err(SceneError::InvalidCamera(format!(
            "camera at ({:.3}, {:.3}, {:.3}) is below the terrain",
            c.x, c.y, c.z
        )));
    }
    Ok(c)
}

/// Pixel `(u, v)` covers `[u, u+1) × [v, v+1)`; rays go through pixel centers.
fn pixel_ray(pose: &Pose, k: &CameraIntrinsics, u: u32, v: u32) -> (Vec3, f64) {
    let ray_cam = k.ray(u as f64 + 0.5, v as f64 + 0.5);
    let len = ray_cam.norm();
    let dir = pose.rotation.matrix().transpose() * (ray_cam / len);
    (dir, len)
}

/// z-depth per pixel; `0.0` where the ray leaves the extent or hits nothing.
pub fn render_depth(scene: &HeightfieldScene, pose: &Pose, k: &CameraIntrinsics) -> Result<DepthMap, SceneError> {
    k.validate()?;
    let c = check_camera(scene, pose)?;
    let mut depth = DepthMap::zeros(k.width, k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            let (dir, len) = pixel_ray(pose, k, u, v);
            if let Some(hit) = scene.intersect(&c, &dir) {
                depth.set(u, v, (hit.t / len) as f32);
            }
        }
    }
    Ok(depth)
}

const SUN: [f64; 3] = [0.35, -0.25, 0.9];
const SKY: [f64; 3] = [0.55, 0.7, 0.9];

/// Simple shaded RGB rendering in [0, 1]: checkered terrain albedo under a
/// fixed sun, a red landmark and a flat sky.
pub fn render_image(scene: &HeightfieldScene, pose: &Pose, k: &CameraIntrinsics) -> Result<Image3, SceneError> {
    k.validate()?;
    let c = check_camera(scene, pose)?;
    let sun = Vec3::from(SUN).normalize();
    let mut img = Image3::zeros(k.width, k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            let (dir, _) = pixel_ray(pose, k, u, v);
            let rgb = match scene.intersect(&c, &dir) {
                None => SKY,
                Some(hit) => {
                    let p = hit.point;
                    let (normal, albedo) = match hit.surface {
                        Surface::LandmarkTop => (Vec3::z(), [0.75, 0.2, 0.15]),
                        Surface::LandmarkWall => (wall_normal(&scene.landmark, &p), [0.6, 0.15, 0.1]),
                        Surface::Terrain => {
                            let checker = ((p.x / 50.0).floor() + (p.y / 50.0).floor()).rem_euclid(2.0);
                            let tint = ((p.z - scene.base) / 60.0).clamp(0.0, 1.0);
                            (
                                scene.normal(p.x, p.y),
                                [0.25 + 0.2 * checker + 0.3 * tint, 0.45 + 0.15 * checker, 0.2 + 0.1 * checker],
                            )
                        }
                    };
                    let shade = 0.25 + 0.75 * normal.dot(&sun).max(0.0);
                    albedo.map(|a| (a * shade).clamp(0.0, 1.0))
                }
            };
            for (ch, val) in rgb.iter().enumerate() {
                img.set(ch, u, v, *val);
            }
        }
    }
    Ok(img)
}

fn wall_normal(lm: &Landmark, p: &Vec3) -> Vec3 {
    if (p.x.abs() - lm.half_x).abs() < (p.y.abs() - lm.half_y).abs() {
        Vec3::new(p.x.signum(), 0.0, 0.0)
    } else {
        Vec3::new(0.0, p.y.signum(), 0.0)
    }
}

// ---------------------------------------------------------------------------
// Views and trajectories

/// One image of a site. Field names are the manifest's JSON schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub id: String,
    pub modality: Modality,
    pub quat_wxyz: UnitQuaternion,
    pub translation_xyz: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub altitude_agl: f64,
    pub depth_path: String,
    pub is_real: bool,
}

impl ViewRecord {
    /// Snaps the rotation to its canonical quaternion so the stored pose is
    /// exactly what a manifest reader reconstructs.
    pub fn new(
        id: String,
        modality: Modality,
        rotation: &Rotation3,
        center: &Vec3,
        k: &CameraIntrinsics,
        altitude_agl: f64,
    ) -> Self {
        let q = rotation_to_quat(rotation);
        let pose = Pose::from_center(crate::geometry::quat_to_rotation(&q), center);
        Self {
            depth_path: format!("depth/{id}.skyd"),
            id,
            modality,
            quat_wxyz: q,
            translation_xyz: pose.translation.into(),
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            altitude_agl,
            is_real: false,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::from_quat(&self.quat_wxyz, Vec3::from(self.translation_xyz))
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics { fx: self.fx, fy: self.fy, cx: self.cx, cy: self.cy, width: self.width, height: self.height }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundConfig {
    pub n: usize,
    pub radius: f64,
    pub altitude: f64,
    pub hfov_deg: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for GroundConfig {
    fn default() -> Self {
        Self { n: 150, radius: 110.0, altitude: 5.0, hfov_deg: 60.0, width: 64, height: 48 }
    }
}

/// One altitude band of the helical descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelixBand {
    pub name: String,
    pub frames: usize,
    /// Altitude AGL at the first and last frame of the band.
    pub altitude: (f64, f64),
    /// Helix radius at the first and last frame of the band.
    pub radius: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AerialConfig {
    pub bands: Vec<HelixBand>,
    pub turns_per_band: f64,
    /// Rig yaw offsets (left, center, right) in degrees, clockwise positive.
    pub yaw_offsets_deg: [f64; 3],
    pub hfov_deg: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for AerialConfig {
    fn default() -> Self {
        Self::with_frames([60, 120, 180])
    }
}

impl AerialConfig {
    pub fn with_frames(frames: [usize; 3]) -> Self {
        let band = |name: &str, frames, altitude, radius| HelixBand { name: name.into(), frames, altitude, radius };
        Self {
            bands: vec![
                band("high", frames[0], (800.0, 700.0), (520.0, 440.0)),
                band("medium", frames[1], (550.0, 450.0), (400.0, 320.0)),
                band("low", frames[2], (300.0, 200.0), (280.0, 200.0)),
            ],
            turns_per_band: 2.0,
            yaw_offsets_deg: [-20.0, 0.0, 20.0],
            hfov_deg: 55.0,
            width: 64,
            height: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatelliteConfig {
    pub n: usize,
    pub altitude: f64,
    pub jitter: bool,
    pub hfov_deg: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for SatelliteConfig {
    fn default() -> Self {
        Self { n: 120, altitude: 1500.0, jitter: true, hfov_deg: 40.0, width: 64, height: 64 }
    }
}

pub const RIG_NAMES: [&str; 3] = ["left", "center", "right"];

/// Cameras evenly spaced on a circle around the landmark, all looking at
/// the landmark center.
pub fn ground_circle(scene: &HeightfieldScene, cfg: &GroundConfig) -> Result<Vec<ViewRecord>, SceneError> {
    if !(cfg.radius > 0.0) {
        return Err(SceneError::InvalidInput(format!("ground radius must be > 0, got {}", cfg.radius)));
    }
    check_band(Modality::Ground, cfg.altitude, "ground altitude")?;
    let k = CameraIntrinsics::from_hfov(cfg.hfov_deg.to_radians(), cfg.width, cfg.height)?;
    let target = scene.landmark_center();
    (0..cfg.n)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / cfg.n as f64;
            let (x, y) = (target.x + cfg.radius * theta.cos(), target.y + cfg.radius * theta.sin());
            let eye = scene.point_above(x, y, cfg.altitude);
            let r = look_at_rotation(&eye, &target, &Vec3::z())?;
            Ok(ViewRecord::new(format!("ground_{i:04}"), Modality::Ground, &r, &eye, &k, cfg.altitude))
        })
        .collect()
}

/// Triple-camera rig descending a helix around the landmark. The center
/// camera looks at the landmark; the side cameras are the center camera
/// yawed about the world vertical.
pub fn aerial_helix_rig(scene: &HeightfieldScene, cfg: &AerialConfig) -> Result<Vec<ViewRecord>, SceneError> {
    let k = CameraIntrinsics::from_hfov(cfg.hfov_deg.to_radians(), cfg.width, cfg.height)?;
    for band in &cfg.bands {
        check_band(Modality::Aerial, band.altitude.0, "aerial band altitude")?;
        check_band(Modality::Aerial, band.altitude.1, "aerial band altitude")?;
        if !(band.radius.0 > 0.0 && band.radius.1 > 0.0) {
            return Err(SceneError::InvalidInput(format!("band {} radius must be > 0", band.name)));
        }
    }
    let target = scene.landmark_center();
    let mut per_camera: [Vec<ViewRecord>; 3] = Default::default();
    let mut theta = 0.0;
    for band in &cfg.bands {
        let sweep = 2.0 * PI * cfg.turns_per_band;
        for f in 0..band.frames {
            let s = if band.frames > 1 { f as f64 / (band.frames - 1) as f64 } else { 0.0 };
            let agl = lerp(band.altitude.0, band.altitude.1, s);
            let radius = lerp(band.radius.0, band.radius.1, s);
            let angle = theta + sweep * f as f64 / band.frames.max(1) as f64;
            let eye = scene.point_above(target.x + radius * angle.cos(), target.y + radius * angle.sin(), agl);
            let center_rot = look_at_rotation(&eye, &target, &Vec3::z())?;
            for (cam, yaw) in cfg.yaw_offsets_deg.iter().enumerate() {
                let r = rig_rotation(&center_rot, yaw.to_radians());
                let id = format!("aerial_{}_{}_{f:04}", RIG_NAMES[cam], band.name);
                per_camera[cam].push(ViewRecord::new(id, Modality::Aerial, &r, &eye, &k, agl));
            }
        }
        theta += sweep;
    }
    Ok(per_camera.into_iter().flatten().collect())
}

/// Yaws a world-to-camera rotation by `yaw` radians clockwise (seen from
/// above) about the world vertical: `R·Rz(yaw)`.
pub fn rig_rotation(center: &Rotation3, yaw: f64) -> Rotation3 {
    *center * Rotation3::rz(yaw)
}

/// Nadir cameras on a (optionally jittered) grid covering the extent.
pub fn satellite_grid(scene: &HeightfieldScene, cfg: &SatelliteConfig, seed: u64) -> Result<Vec<ViewRecord>, SceneError> {
    check_band(Modality::Satellite, cfg.altitude, "satellite altitude")?;
    let k = CameraIntrinsics::from_hfov(cfg.hfov_deg.to_radians(), cfg.width, cfg.height)?;
    if cfg.n == 0 {
        return Ok(Vec::new());
    }
    let cols = (cfg.n as f64).sqrt().ceil() as usize;
    let rows = cfg.n.div_ceil(cols);
    let (cell_x, cell_y) = (scene.extent / cols as f64, scene.extent / rows as f64);
    let half = scene.half_extent();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a7e_111e);
    let r = nadir_rotation();
    (0..cfg.n)
        .map(|i| {
            let (col, row) = (i % cols, i / cols);
            let mut x = -half + (col as f64 + 0.5) * cell_x;
            let mut y = -half + (row as f64 + 0.5) * cell_y;
            if cfg.jitter {
                x += rng.random_range(-0.5..0.5) * cell_x;
                y += rng.random_range(-0.5..0.5) * cell_y;
            }
            let eye = scene.point_above(x, y, cfg.altitude);
            Ok(ViewRecord::new(format!("satellite_{i:04}"), Modality::Satellite, &r, &eye, &k, cfg.altitude))
        })
        .collect()
}

fn lerp(a: f64, b: f64, s: f64) -> f64 {
    a + (b - a) * s
}

fn check_band(m: Modality, altitude: f64, what: &str) -> Result<(), SceneError> {
    let (lo, hi) = m.altitude_band();
    if !(lo..=hi).contains(&altitude) {
        return Err(SceneError::InvalidInput(format!("{what} {altitude} m outside [{lo}, {hi}] m")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ortho-rectification

/// Orthographic resampling of a view onto a north-up ground grid.
///
/// Cell `(col, row)` has its center at
/// `(origin_x + (col + ½)·gsd, origin_y − (row + ½)·gsd)`.
#[derive(Debug, Clone)]
pub struct OrthoRaster {
    pub origin_x: f64,
    pub origin_y: f64,
    pub gsd: f64,
    pub width: usize,
    pub height: usize,
    /// Surface height recovered from the view's depth at each cell.
    pub heights: Vec<f64>,
    pub color: Image3,
    pub valid: Vec<bool>,
    /// Continuous source pixel coordinates each cell was sampled from.
    pub source_uv: Vec<(f64, f64)>,
}

impl OrthoRaster {
    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        (self.origin_x + (col as f64 + 0.5) * self.gsd, self.origin_y - (row as f64 + 0.5) * self.gsd)
    }

    /// Cell containing world `(x, y)`, if inside the raster.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = ((x - self.origin_x) / self.gsd).floor();
        let row = ((self.origin_y - y) / self.gsd).floor();
        (col >= 0.0 && row >= 0.0 && (col as usize) < self.width && (row as usize) < self.height)
            .then_some((col as usize, row as usize))
    }
}

pub fn ortho_rectify(scene: &HeightfieldScene, view: &ViewRecord, gsd: f64) -> Result<OrthoRaster, SceneError> {
    if view.modality != Modality::Satellite {
        return Err(SceneError::InvalidInput(format!("ortho-rectification needs a satellite view, got {}", view.modality)));
    }
    if !(gsd > 0.0) {
        return Err(SceneError::InvalidInput(format!("gsd must be > 0, got {gsd}")));
    }
    let pose = view.pose();
    let k = view.intrinsics();
    let image = render_image(scene, &pose, &k)?;
    let c = pose.center();
    let rt = pose.rotation.matrix().transpose();

    // Ground footprint of the image corners on the base plane, clipped to the extent.
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (u, v) in [(0.0, 0.0), (k.width as f64, 0.0), (0.0, k.height as f64), (k.width as f64, k.height as f64)] {
        let d = rt * k.ray(u, v);
        if d.z >= 0.0 {
            return Err(SceneError::InvalidCamera("image corner ray does not reach the ground".into()));
        }
        let p = c + d * ((scene.base - c.z) / d.z);
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let h = scene.half_extent();
    let (x0, x1, y0, y1) = (x0.max(-h), x1.min(h), y0.max(-h), y1.min(h));
    let origin_x = (x0 / gsd).floor() * gsd;
    let origin_y = (y1 / gsd).ceil() * gsd;
    let width = ((x1 - origin_x) / gsd).ceil().max(0.0) as usize;
    let height = ((origin_y - y0) / gsd).ceil().max(0.0) as usize;

    let n = width * height;
    let mut out = OrthoRaster {
        origin_x,
        origin_y,
        gsd,
        width,
        height,
        heights: vec![0.0; n],
        color: Image3::zeros(width as u32, height as u32),
        valid: vec![false; n],
        source_uv: vec![(f64::NAN, f64::NAN); n],
    };
    for row in 0..height {
        for col in 0..width {
            let (x, y) = out.cell_center(col, row);
            let target = Vec3::new(x, y, scene.height(x, y));
            let p_cam = pose.transform_point(&target);
            let Some((u, v)) = k.project(&p_cam) else { continue };
            if !(0.0..=k.width as f64).contains(&u) || !(0.0..=k.height as f64).contains(&v) {
                continue;
            }
            let idx = row * width + col;
            out.source_uv[idx] = (u, v);
            // The pixel sees the cell only if the first hit along its ray is
            // the cell's own surface point.
            let dir = (target - c).normalize();
            let Some(hit) = scene.intersect(&c, &dir) else { continue };
            if (hit.point - target).norm() > 1e-3 * (1.0 + (target - c).norm() * 1e-3) {
                continue;
            }
            out.heights[idx] = hit.point.z;
            out.valid[idx] = true;
            for ch in 0..3 {
                out.color.set(ch, col as u32, row as u32, sample_image(&image, ch, u, v));
            }
        }
    }
    Ok(out)
}

fn sample_image(img: &Image3, ch: usize, u: f64, v: f64) -> f64 {
    let (fx, fy) = (u - 0.5, v - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = (fx - x0, fy - y0);
    let (w, h) = (img.width as f64 - 1.0, img.height as f64 - 1.0);
    let at = |x: f64, y: f64| img.get(ch, x.clamp(0.0, w) as u32, y.clamp(0.0, h) as u32);
    (1.0 - ay) * ((1.0 - ax) * at(x0, y0) + ax * at(x0 + 1.0, y0))
        + ay * ((1.0 - ax) * at(x0, y0 + 1.0) + ax * at(x0 + 1.0, y0 + 1.0))
}

// ---------------------------------------------------------------------------
// Sites and manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub site_id: String,
    pub seed: u64,
    pub scene: SceneConfig,
    pub ground: GroundConfig,
    pub aerial: AerialConfig,
    pub satellite: SatelliteConfig,
}

impl Default for SiteConfig {
    fn default() -> Self {
        Self {
            site_id: "site_000".into(),
            seed: 0,
            scene: SceneConfig::default(),
            ground: GroundConfig::default(),
            aerial: AerialConfig::default(),
            satellite: SatelliteConfig::default(),
        }
    }
}

/// Conventions recorded in every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conventions {
    pub extrinsics: String,
    pub camera_axes: String,
    pub depth: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            extrinsics: "world_to_camera: x_cam = R * x_world + t".into(),
            camera_axes: "x_right_y_down_z_forward".into(),
            depth: "z_depth_meters_zero_invalid".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteManifest {
    pub site_id: String,
    pub landmark_center: [f64; 3],
    #[serde(default)]
    pub conventions: Conventions,
    /// Terrain the views were generated from, when synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<HeightfieldScene>,
    pub views: Vec<ViewRecord>,
}

impl SiteManifest {
    pub fn count(&self, m: Modality) -> usize {
        self.views.iter().filter(|v| v.modality == m).count()
    }

    pub fn view(&self, id: &str) -> Option<&ViewRecord> {
        self.views.iter().find(|v| v.id == id)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let mut seen = HashSet::new();
        for (i, v) in self.views.iter().enumerate() {
            let field = |name: &str| format!("views[{i}].{name}");
            if !seen.insert(v.id.as_str()) {
                return Err(SceneError::ManifestParse { path: field("id"), message: format!("duplicate view id {:?}", v.id) });
            }
            v.intrinsics()
                .validate()
                .map_err(|e| SceneError::ManifestParse { path: field("fx"), message: e.to_string() })?;
            if !v.translation_xyz.iter().all(|t| t.is_finite()) {
                return Err(SceneError::ManifestParse { path: field("translation_xyz"), message: "non-finite".into() });
            }
            let (lo, hi) = v.modality.altitude_band();
            if !v.is_real && !(lo..=hi).contains(&v.altitude_agl) {
                return Err(SceneError::ManifestParse {
                    path: field("altitude_agl"),
                    message: format!("{} m outside the {} band [{lo}, {hi}]", v.altitude_agl, v.modality),
                });
            }
        }
        Ok(())
    }
}

pub fn manifest_to_json(m: &SiteManifest) -> String {
    serde_json::to_string_pretty(m).expect("manifest serializes")
}

pub fn manifest_from_json(text: &str) -> Result<SiteManifest, SceneError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let m: SiteManifest = serde_path_to_error::deserialize(de).map_err(|e| SceneError::ManifestParse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    m.validate()?;
    Ok(m)
}

pub fn write_manifest(m: &SiteManifest, dir: &Path) -> Result<PathBuf, SceneError> {
    let path = dir.join(MANIFEST_FILE);
    write_atomic(&path, manifest_to_json(m).as_bytes())?;
    Ok(path)
}

/// Accepts either a site directory or a manifest file path.
pub fn read_manifest(path: &Path) -> Result<SiteManifest, SceneError> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    manifest_from_json(&fs::read_to_string(file)?)
}

#[derive(Debug, Clone)]
pub struct Site {
    pub scene: HeightfieldScene,
    pub manifest: SiteManifest,
}

/// Builds the terrain and every view of a site (no rendering).
pub fn generate_site(cfg: &SiteConfig) -> Result<Site, SceneError> {
    let scene = HeightfieldScene::generate(&cfg.scene, cfg.seed)?;
    let mut views = ground_circle(&scene, &cfg.ground)?;
    views.extend(aerial_helix_rig(&scene, &cfg.aerial)?);
    views.extend(satellite_grid(&scene, &cfg.satellite, cfg.seed)?);
    let manifest = SiteManifest {
        site_id: cfg.site_id.clone(),
        landmark_center: scene.landmark_center().into(),
        conventions: Conventions::default(),
        scene: Some(scene.clone()),
        views,
    };
    manifest.validate()?;
    Ok(Site { scene, manifest })
}

/// Renders every view's depth in parallel (order-independent per view).
pub fn render_site_depths(site: &Site) -> Result<Vec<DepthMap>, SceneError> {
    site.manifest
        .views
        .par_iter()
        .map(|v| render_depth(&site.scene, &v.pose(), &v.intrinsics()))
        .collect()
}

/// Writes `manifest.json` and one depth raster per view under `dir`.
pub fn write_site(site: &Site, dir: &Path) -> Result<(), SceneError> {
    let depths = render_site_depths(site)?;
    for (view, depth) in site.manifest.views.iter().zip(&depths) {
        depth.write(&dir.join(&view.depth_path))?;
    }
    write_manifest(&site.manifest, dir)?;
    Ok(())
}
