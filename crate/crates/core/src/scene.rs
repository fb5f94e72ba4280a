//! Scene descriptions: density fields, emitters, environment lighting and
//! cameras, plus the geometric queries (density, gradients, derived normals)
//! that everything downstream shades with.

use crate::brdf::MaterialField;
use crate::math::{Rgb, Vec3};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("failed to parse scene JSON: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Along-ray footprint given to point emitters so that radiance queries can
/// see them; next-event estimation still treats them as true points.
pub const POINT_EMITTER_VISUAL_RADIUS: f64 = 0.1;

#[derive(Copy, Clone, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, t_far: f64) -> Result<Self, SceneError> {
        if (dir.norm() - 1.0).abs() > 1e-6 {
            return Err(SceneError::Invalid {
                field: "ray.direction",
                reason: format!("not unit length: |d| = {}", dir.norm()),
            });
        }
        if !(t_far > 0.0) {
            return Err(SceneError::Invalid {
                field: "ray.t_far",
                reason: format!("must be > 0, got {t_far}"),
            });
        }
        Ok(Ray { origin, dir, t_far })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianBlob {
    pub center: Vec3,
    pub peak: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DensityGrid {
    pub resolution: [usize; 3],
    pub min: Vec3,
    pub max: Vec3,
    /// Node values in x-fastest order, length nx*ny*nz.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DensityField {
    HomogeneousBox { min: Vec3, max: Vec3, sigma: f64 },
    GaussianBlobs { blobs: Vec<GaussianBlob> },
    Grid(DensityGrid),
}

/// Gaussian blobs are truncated to zero beyond this many radii.
const BLOB_CUTOFF_RADII: f64 = 4.0;

fn inside(min: Vec3, max: Vec3, x: Vec3) -> bool {
    x.x >= min.x && x.x <= max.x && x.y >= min.y && x.y <= max.y && x.z >= min.z && x.z <= max.z
}

impl DensityGrid {
    fn trilinear(&self, x: Vec3) -> f64 {
        let [nx, ny, nz] = self.resolution;
        let ext = self.max - self.min;
        let gx = (x.x - self.min.x) / ext.x * (nx - 1) as f64;
        let gy = (x.y - self.min.y) / ext.y * (ny - 1) as f64;
        let gz = (x.z - self.min.z) / ext.z * (nz - 1) as f64;
        let ix = (gx.floor() as usize).min(nx - 2);
        let iy = (gy.floor() as usize).min(ny - 2);
        let iz = (gz.floor() as usize).min(nz - 2);
        let fx = gx - ix as f64;
        let fy = gy - iy as f64;
        let fz = gz - iz as f64;
        let at = |i: usize, j: usize, k: usize| self.values[i + nx * (j + ny * k)];
        let mut acc = 0.0;
        for (dk, wk) in [(0, 1.0 - fz), (1, fz)] {
            for (dj, wj) in [(0, 1.0 - fy), (1, fy)] {
                for (di, wi) in [(0, 1.0 - fx), (1, fx)] {
                    acc += wi * wj * wk * at(ix + di, iy + dj, iz + dk);
                }
            }
        }
        acc
    }
}

impl DensityField {
    pub fn validate(&self) -> Result<(), SceneError> {
        match self {
            DensityField::HomogeneousBox { min, max, sigma } => {
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return Err(SceneError::Invalid {
                        field: "density.sigma",
                        reason: format!("must be finite and >= 0, got {sigma}"),
                    });
                }
                if min.x >= max.x || min.y >= max.y || min.z >= max.z {
                    return Err(SceneError::Invalid {
                        field: "density.bounds",
                        reason: "min must be strictly below max".into(),
                    });
                }
            }
            DensityField::GaussianBlobs { blobs } => {
                for (i, b) in blobs.iter().enumerate() {
                    if !(b.peak.is_finite() && b.peak >= 0.0 && b.radius > 0.0) {
                        return Err(SceneError::Invalid {
                            field: "density.blobs",
                            reason: format!("blob {i}: peak >= 0 and radius > 0 required"),
                        });
                    }
                }
            }
            DensityField::Grid(g) => {
                let [nx, ny, nz] = g.resolution;
                if nx < 2 || ny < 2 || nz < 2 {
                    return Err(SceneError::Invalid {
                        field: "density.resolution",
                        reason: "each axis needs at least 2 nodes".into(),
                    });
                }
                if g.values.len() != nx * ny * nz {
                    return Err(SceneError::Invalid {
                        field: "density.values",
                        reason: format!("expected {} values, got {}", nx * ny * nz, g.values.len()),
                    });
                }
                if g.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(SceneError::Invalid {
                        field: "density.values",
                        reason: "all grid values must be finite and >= 0".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// sigma(x); zero outside the declared bounds. Total and deterministic.
    pub fn value(&self, x: Vec3) -> f64 {
        match self {
            DensityField::HomogeneousBox { min, max, sigma } => {
                if inside(*min, *max, x) {
                    *sigma
                } else {
                    0.0
                }
            }
            DensityField::GaussianBlobs { blobs } => {
                let mut acc = 0.0;
                for b in blobs {
                    let d2 = (x - b.center).norm_squared();
                    let cutoff = BLOB_CUTOFF_RADII * b.radius;
                    if d2 <= cutoff * cutoff {
                        acc += b.peak * (-d2 / (2.0 * b.radius * b.radius)).exp();
                    }
                }
                acc
            }
            DensityField::Grid(g) => {
                if inside(g.min, g.max, x) {
                    g.trilinear(x)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        match self {
            DensityField::HomogeneousBox { min, max, .. } => (*min, *max),
            DensityField::GaussianBlobs { blobs } => {
                let mut lo = Vec3::splat(f64::INFINITY);
                let mut hi = Vec3::splat(f64::NEG_INFINITY);
                for b in blobs {
                    let r = Vec3::splat(BLOB_CUTOFF_RADII * b.radius);
                    lo = lo.min(b.center - r);
                    hi = hi.max(b.center + r);
                }
                if blobs.is_empty() {
                    (Vec3::splat(-1.0), Vec3::splat(1.0))
                } else {
                    (lo, hi)
                }
            }
            DensityField::Grid(g) => (g.min, g.max),
        }
    }

    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }

    /// Analytic gradient for analytic variants; central differences with
    /// h = 1e-4 * diameter for grids.
    pub fn gradient(&self, x: Vec3) -> Vec3 {
        match self {
            DensityField::HomogeneousBox { .. } => Vec3::ZERO,
            DensityField::GaussianBlobs { blobs } => {
                let mut g = Vec3::ZERO;
                for b in blobs {
                    let d = x - b.center;
                    let d2 = d.norm_squared();
                    let cutoff = BLOB_CUTOFF_RADII * b.radius;
                    if d2 <= cutoff * cutoff {
                        let v = b.peak * (-d2 / (2.0 * b.radius * b.radius)).exp();
                        g += d * (-v / (b.radius * b.radius));
                    }
                }
                g
            }
            DensityField::Grid(_) => {
                let h = 1e-4 * self.diameter();
                let mut g = Vec3::ZERO;
                for axis in 0..3 {
                    let mut xp = x;
                    xp.set(axis, x.get(axis) + h);
                    let mut xm = x;
                    xm.set(axis, x.get(axis) - h);
                    g.set(axis, (self.value(xp) - self.value(xm)) / (2.0 * h));
                }
                g
            }
        }
    }

    /// -grad sigma / |grad sigma| when the gradient is meaningful; `None`
    /// signals a degenerate (constant) region.
    pub fn derived_normal(&self, x: Vec3) -> Option<Vec3> {
        let g = self.gradient(x);
        let n = g.norm();
        if n > 1e-9 {
            Some(-g / n)
        } else {
            None
        }
    }

    /// Upper bound on sigma, used by near-surface rejection sampling.
    pub fn max_density(&self) -> f64 {
        match self {
            DensityField::HomogeneousBox { sigma, .. } => *sigma,
            DensityField::GaussianBlobs { blobs } => blobs.iter().map(|b| b.peak).sum(),
            DensityField::Grid(g) => g.values.iter().cloned().fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Emitter {
    Point { position: Vec3, intensity: Rgb },
    SphericalArea { position: Vec3, radius: f64, radiance: Rgb },
}

impl Emitter {
    pub fn validate(&self) -> Result<(), SceneError> {
        let ok = match self {
            Emitter::Point { intensity, .. } => {
                intensity.is_finite() && intensity.min(Vec3::ZERO) == Vec3::ZERO
            }
            Emitter::SphericalArea { radius, radiance, .. } => {
                *radius > 0.0 && radiance.is_finite() && radiance.min(Vec3::ZERO) == Vec3::ZERO
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SceneError::Invalid {
                field: "emitters",
                reason: "emission must be nonnegative; area radius must be > 0".into(),
            })
        }
    }

    pub fn position(&self) -> Vec3 {
        match self {
            Emitter::Point { position, .. } | Emitter::SphericalArea { position, .. } => *position,
        }
    }

    /// Unshadowed irradiance arriving at `x` for next-event estimation,
    /// together with the direction and distance to the emitter. Area
    /// emitters use the far-field point approximation L * pi R^2 / d^2.
    pub fn nee(&self, x: Vec3) -> (Vec3, f64, Rgb) {
        let to = self.position() - x;
        let d = to.norm().max(1e-9);
        let dir = to / d;
        let e = match self {
            Emitter::Point { intensity, .. } => *intensity / (d * d),
            Emitter::SphericalArea { radius, radiance, .. } => {
                *radiance * (std::f64::consts::PI * radius * radius / (d * d))
            }
        };
        (dir, d, e)
    }

    /// Radius the emitter presents to radiance-along-ray queries.
    pub fn visual_radius(&self) -> f64 {
        match self {
            Emitter::Point { .. } => POINT_EMITTER_VISUAL_RADIUS,
            Emitter::SphericalArea { radius, .. } => *radius,
        }
    }

    /// Radiance seen when a ray hits the emitter's visual sphere.
    pub fn visual_radiance(&self) -> Rgb {
        match self {
            Emitter::Point { intensity, .. } => {
                *intensity / (POINT_EMITTER_VISUAL_RADIUS * POINT_EMITTER_VISUAL_RADIUS)
            }
            Emitter::SphericalArea { radiance, .. } => *radiance,
        }
    }

    /// Distance at which the ray (x, dir) first hits the visual sphere.
    pub fn hit_distance(&self, x: Vec3, dir: Vec3) -> Option<f64> {
        let r = self.visual_radius();
        let oc = x - self.position();
        let b = oc.dot(dir);
        let c = oc.norm_squared() - r * r;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let t = -b - disc.sqrt();
        if t > 1e-9 {
            Some(t)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvironmentMap {
    pub height: usize,
    pub width: usize,
    /// Row-major texels, 3 floats each; row 0 is the +z pole band.
    pub data: Vec<f64>,
    #[serde(default)]
    pub optimizable: bool,
}

impl EnvironmentMap {
    pub fn constant(height: usize, width: usize, value: Rgb) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&[value.x, value.y, value.z]);
        }
        EnvironmentMap { height, width, data, optimizable: false }
    }

    /// 32x64 is the default resolution for optimizable far-field lighting.
    pub fn default_resolution(value: Rgb) -> Self {
        Self::constant(32, 64, value)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(Vec3) -> Rgb) -> Self {
        let mut env = Self::constant(height, width, Vec3::ZERO);
        for i in 0..height {
            for j in 0..width {
                let theta = (i as f64 + 0.5) / height as f64 * std::f64::consts::PI;
                let phi = -std::f64::consts::PI
                    + (j as f64 + 0.5) / width as f64 * 2.0 * std::f64::consts::PI;
                let dir = crate::math::spherical_dir(theta.sin(), theta.cos(), phi);
                env.set_texel(i, j, f(dir));
            }
        }
        env
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.data.len() != self.height * self.width * 3 {
            return Err(SceneError::Invalid {
                field: "environment.data",
                reason: format!(
                    "expected {} floats, got {}",
                    self.height * self.width * 3,
                    self.data.len()
                ),
            });
        }
        if self.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SceneError::Invalid {
                field: "environment.data",
                reason: "texels must be finite and >= 0".into(),
            });
        }
        Ok(())
    }

    pub fn texel(&self, row: usize, col: usize) -> Rgb {
        let i = (row * self.width + col) * 3;
        Rgb::new(self.data[i], self.data[i + 1], self.data[i + 2])
    }

    pub fn set_texel(&mut self, row: usize, col: usize, v: Rgb) {
        let i = (row * self.width + col) * 3;
        self.data[i] = v.x;
        self.data[i + 1] = v.y;
        self.data[i + 2] = v.z;
    }

    /// The four bilinear taps for a direction: (texel index, weight).
    /// Wraps in phi, clamps in theta, so the lookup is continuous across the
    /// azimuthal seam and total on the sphere.
    pub fn taps(&self, dir: Vec3) -> [(usize, f64); 4] {
        let theta = dir.z.clamp(-1.0, 1.0).acos();
        let phi = dir.y.atan2(dir.x);
        let fr = theta / std::f64::consts::PI * self.height as f64 - 0.5;
        let fc = (phi + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * self.width as f64
            - 0.5;
        let r0 = fr.floor();
        let c0 = fc.floor();
        let tr = fr - r0;
        let tc = fc - c0;
        let clamp_row = |r: i64| r.clamp(0, self.height as i64 - 1) as usize;
        let wrap_col = |c: i64| c.rem_euclid(self.width as i64) as usize;
        let (r0i, r1i) = (clamp_row(r0 as i64), clamp_row(r0 as i64 + 1));
        let (c0i, c1i) = (wrap_col(c0 as i64), wrap_col(c0 as i64 + 1));
        [
            (r0i * self.width + c0i, (1.0 - tr) * (1.0 - tc)),
            (r0i * self.width + c1i, (1.0 - tr) * tc),
            (r1i * self.width + c0i, tr * (1.0 - tc)),
            (r1i * self.width + c1i, tr * tc),
        ]
    }

    pub fn radiance(&self, dir: Vec3) -> Rgb {
        let mut acc = Rgb::ZERO;
        for (idx, w) in self.taps(dir) {
            acc += Rgb::new(self.data[idx * 3], self.data[idx * 3 + 1], self.data[idx * 3 + 2]) * w;
        }
        acc
    }
}

/// Pinhole camera; rays go through pixel centers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn ray(&self, px: usize, py: usize, t_far: f64) -> Ray {
        let forward = (self.look_at - self.position).normalized();
        let right = forward.cross(self.up).normalized();
        let up = right.cross(forward);
        let tan = (self.fov_y_deg.to_radians() * 0.5).tan();
        let aspect = self.width as f64 / self.height as f64;
        let ndc_x = ((px as f64 + 0.5) / self.width as f64) * 2.0 - 1.0;
        let ndc_y = 1.0 - ((py as f64 + 0.5) / self.height as f64) * 2.0;
        let dir = (forward + right * (ndc_x * tan * aspect) + up * (ndc_y * tan)).normalized();
        Ray { origin: self.position, dir, t_far }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scene {
    pub density: DensityField,
    pub materials: MaterialField,
    #[serde(default)]
    pub emitters: Vec<Emitter>,
    pub environment: EnvironmentMap,
    /// Uniform volumetric emission radiance gathered where sigma > 0.
    #[serde(default = "Rgb::default")]
    pub emission: Rgb,
    pub camera: Option<Camera>,
    /// Ray horizon in scene units.
    #[serde(default = "default_t_far")]
    pub t_far: f64,
}

fn default_t_far() -> f64 {
    4.0
}

impl Scene {
    pub fn validate(&self) -> Result<(), SceneError> {
        self.density.validate()?;
        self.materials.validate().map_err(|reason| SceneError::Invalid {
            field: "materials",
            reason,
        })?;
        for e in &self.emitters {
            e.validate()?;
        }
        self.environment.validate()?;
        if !(self.t_far > 0.0) {
            return Err(SceneError::Invalid {
                field: "t_far",
                reason: format!("must be > 0, got {}", self.t_far),
            });
        }
        if !self.emission.is_finite() || self.emission.min(Vec3::ZERO) != Vec3::ZERO {
            return Err(SceneError::Invalid {
                field: "emission",
                reason: "must be finite and nonnegative".into(),
            });
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Scene, SceneError> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serialization cannot fail")
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        self.density.bounds()
    }

    pub fn sample_in_bounds(&self, rng: &mut RngStream) -> Vec3 {
        let (lo, hi) = self.bounds();
        Vec3::new(
            rng.uniform(lo.x, hi.x),
            rng.uniform(lo.y, hi.y),
            rng.uniform(lo.z, hi.z),
        )
    }

    /// Radiance of emitter visual spheres hit by the ray (x, omega), each
    /// attenuated by the transmittance to its hit point. This is analytic
    /// lighting metadata: the caches pass it through rather than learn it.
    pub fn emitter_along_ray(&self, x: Vec3, omega: Vec3, n_shadow: usize) -> Rgb {
        let mut acc = Rgb::ZERO;
        for e in &self.emitters {
            if let Some(t_hit) = e.hit_distance(x, omega) {
                if t_hit < self.t_far {
                    let tr = crate::volume::transmittance(
                        &self.density,
                        x,
                        x + omega * t_hit,
                        n_shadow,
                    );
                    acc += e.visual_radiance() * tr;
                }
            }
        }
        acc
    }

    /// Two-sided shading frame at x: the density-derived normal flipped
    /// toward the viewing direction. `None` in constant-density regions.
    pub fn shading_frame(&self, x: Vec3, toward: Vec3) -> Option<crate::math::ShadingFrame> {
        let mut n = self.density.derived_normal(x)?;
        if n.dot(toward) < 0.0 {
            n = -n;
        }
        Some(crate::math::ShadingFrame::from_normal(n))
    }

    /// Rejection-samples a dense point (sigma > 0.5 * sigma_max) and offsets
    /// it along the derived normal; falls back to a uniform bounds point
    /// when the scene is too empty to hit one.
    pub fn sample_near_surface(&self, rng: &mut RngStream) -> Vec3 {
        let sigma_max = self.density.max_density();
        if sigma_max <= 0.0 {
            return self.sample_in_bounds(rng);
        }
        for _ in 0..64 {
            let x = self.sample_in_bounds(rng);
            if self.density.value(x) > 0.5 * sigma_max {
                let offset = 0.05 * self.density.diameter() * rng.next_gaussian();
                let dir = match self.density.derived_normal(x) {
                    Some(n) => n,
                    None => {
                        let g = rng.next_gaussian();
                        let g2 = rng.next_gaussian();
                        let g3 = rng.next_gaussian();
                        Vec3::new(g, g2, g3).try_normalized(1e-12).unwrap_or(Vec3::new(0.0, 0.0, 1.0))
                    }
                };
                return x + dir * offset;
            }
        }
        self.sample_in_bounds(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brdf::MaterialField;

    fn box_field(sigma: f64) -> DensityField {
        DensityField::HomogeneousBox { min: Vec3::splat(-1.0), max: Vec3::splat(1.0), sigma }
    }

    #[test]
    fn homogeneous_box_density() {
        let f = box_field(2.0);
        assert_eq!(f.value(Vec3::new(0.2, -0.4, 0.9)), 2.0);
        assert_eq!(f.value(Vec3::new(1.5, 0.0, 0.0)), 0.0);
        assert_eq!(f.gradient(Vec3::new(0.1, 0.1, 0.1)), Vec3::ZERO);
        assert!(f.derived_normal(Vec3::ZERO).is_none());
    }

    #[test]
    fn grid_node_identity_and_linear_gradient() {
        // grid encoding sigma(x) = x + 2 over [1,3] so values stay nonneg
        let n = 5;
        let mut values = vec![0.0; n * n * n];
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let x = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
                    values[i + n * (j + n * k)] = x + 2.0;
                }
            }
        }
        let g = DensityField::Grid(DensityGrid {
            resolution: [n; 3],
            min: Vec3::splat(-1.0),
            max: Vec3::splat(1.0),
            values,
        });
        // lattice node value is exact
        assert!((g.value(Vec3::new(-0.5, 0.0, 0.5)) - 1.5).abs() < 1e-12);
        // gradient of the embedded linear field
        let grad = g.gradient(Vec3::new(0.13, -0.4, 0.2));
        assert!((grad - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-6, "{grad:?}");
        // derived normal has the sign convention -grad
        let nrm = g.derived_normal(Vec3::new(0.13, -0.4, 0.2)).unwrap();
        assert!((nrm - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn blob_gradient_and_normal() {
        let f = DensityField::GaussianBlobs {
            blobs: vec![GaussianBlob { center: Vec3::ZERO, peak: 5.0, radius: 0.4 }],
        };
        // symmetric at the center
        assert!(f.gradient(Vec3::ZERO).norm() < 1e-12);
        // surface point on +x: outward normal is +x
        let n = f.derived_normal(Vec3::new(0.5, 0.0, 0.0)).unwrap();
        assert!((n - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-3, "{n:?}");
        // truncated support
        assert_eq!(f.value(Vec3::new(1.7, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn density_nonneg_over_random_probes() {
        let fields = [
            box_field(1.5),
            DensityField::GaussianBlobs {
                blobs: vec![
                    GaussianBlob { center: Vec3::new(0.3, 0.0, 0.0), peak: 4.0, radius: 0.3 },
                    GaussianBlob { center: Vec3::new(-0.4, 0.1, 0.2), peak: 7.0, radius: 0.2 },
                ],
            },
            DensityField::Grid(DensityGrid {
                resolution: [3, 3, 3],
                min: Vec3::splat(-1.0),
                max: Vec3::splat(1.0),
                values: (0..27).map(|i| (i % 5) as f64).collect(),
            }),
        ];
        let mut rng = RngStream::new(5);
        for f in &fields {
            for _ in 0..100_000 {
                let x = Vec3::new(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
                let v = f.value(x);
                assert!(v >= 0.0 && v.is_finite());
                assert_eq!(v, f.value(x));
            }
        }
    }

    #[test]
    fn env_lookup_basics() {
        let env = EnvironmentMap::constant(8, 16, Rgb::ONE);
        let mut rng = RngStream::new(9);
        for _ in 0..100 {
            let d = Vec3::new(rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian())
                .normalized();
            assert!((env.radiance(d) - Rgb::ONE).norm() < 1e-12);
        }

        let mut env = EnvironmentMap::constant(8, 16, Rgb::ZERO);
        for j in 0..16 {
            env.set_texel(0, j, Rgb::new(2.0, 0.0, 0.0));
        }
        let v = env.radiance(Vec3::new(0.0, 0.0, 1.0));
        assert!((v - Rgb::new(2.0, 0.0, 0.0)).norm() < 1e-12, "{v:?}");
    }

    #[test]
    fn env_seam_continuity() {
        // smooth azimuthal variation; compare just either side of phi = +-pi
        let env = EnvironmentMap::from_fn(16, 32, |d| {
            let phi = d.y.atan2(d.x);
            Rgb::splat(1.0 + 0.5 * phi.cos())
        });
        let delta = 1e-4;
        let theta: f64 = 1.3;
        let a = crate::math::spherical_dir(theta.sin(), theta.cos(), std::f64::consts::PI - delta);
        let b = crate::math::spherical_dir(theta.sin(), theta.cos(), -std::f64::consts::PI + delta);
        let diff = (env.radiance(a) - env.radiance(b)).norm();
        assert!(diff < 1e-3, "seam jump {diff}");
    }

    #[test]
    fn env_constant_integrates_to_4pi() {
        let env = EnvironmentMap::constant(8, 16, Rgb::splat(0.7));
        let mut rng = RngStream::new(21);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            // uniform sphere direction
            let z = rng.uniform(-1.0, 1.0);
            let phi = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
            let s = (1.0 - z * z).max(0.0).sqrt();
            let d = Vec3::new(s * phi.cos(), s * phi.sin(), z);
            acc += env.radiance(d).x;
        }
        let integral = acc / n as f64 * 4.0 * std::f64::consts::PI;
        let expect = 0.7 * 4.0 * std::f64::consts::PI;
        assert!((integral - expect).abs() / expect < 0.005);
    }

    #[test]
    fn scene_json_round_trip() {
        let scene = Scene {
            density: box_field(1.0),
            materials: MaterialField::constant(0.2, 0.5, Rgb::new(0.6, 0.5, 0.4)),
            emitters: vec![Emitter::Point { position: Vec3::new(0.0, 0.0, 0.9), intensity: Rgb::ONE }],
            environment: EnvironmentMap::constant(4, 8, Rgb::splat(0.25)),
            emission: Rgb::ZERO,
            camera: Some(Camera {
                position: Vec3::new(0.0, -2.5, 0.0),
                look_at: Vec3::ZERO,
                up: Vec3::new(0.0, 0.0, 1.0),
                fov_y_deg: 45.0,
                width: 32,
                height: 32,
            }),
            t_far: 4.0,
        };
        let text = scene.to_json();
        let back = Scene::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn invalid_scene_rejected() {
        let mut scene = Scene {
            density: box_field(1.0),
            materials: MaterialField::constant(0.2, 0.5, Rgb::splat(0.5)),
            emitters: vec![],
            environment: EnvironmentMap::constant(2, 4, Rgb::splat(0.25)),
            emission: Rgb::ZERO,
            camera: None,
            t_far: 4.0,
        };
        scene.environment.data[0] = -1.0;
        let err = scene.validate().unwrap_err().to_string();
        assert!(err.contains("environment"), "{err}");
    }
}
