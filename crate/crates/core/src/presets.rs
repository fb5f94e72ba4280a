//! Built-in analytic scenes used by the tests, the acceptance suite and the
//! CLI (`--scene builtin:<name>`). All live in the canonical [-1,1]^3 box.

use crate::brdf::MaterialField;
use crate::math::{Rgb, Vec3};
use crate::scene::{Camera, DensityField, Emitter, EnvironmentMap, GaussianBlob, Scene};

fn default_camera(width: usize, height: usize) -> Camera {
    Camera {
        position: Vec3::new(0.0, -2.6, 0.6),
        look_at: Vec3::ZERO,
        up: Vec3::new(0.0, 0.0, 1.0),
        fov_y_deg: 40.0,
        width,
        height,
    }
}

/// Soft sky: brighter toward +z with a mild azimuthal tint.
fn sky_env() -> EnvironmentMap {
    EnvironmentMap::from_fn(16, 32, |d| {
        let up = (d.z * 0.5 + 0.5).clamp(0.0, 1.0);
        Rgb::new(0.18 + 0.5 * up, 0.2 + 0.45 * up, 0.25 + 0.55 * up)
    })
}

/// Structured environment with three colored gaussian hot spots; sharp
/// enough that specular roughness is identifiable from highlights.
pub fn spotted_env() -> EnvironmentMap {
    let spots = [
        (Vec3::new(0.3, -0.7, 0.65).normalized(), Rgb::new(9.0, 7.0, 2.5), 24.0),
        (Vec3::new(-0.8, 0.2, 0.56).normalized(), Rgb::new(2.0, 6.5, 9.0), 32.0),
        (Vec3::new(0.6, 0.72, 0.35).normalized(), Rgb::new(7.5, 2.0, 6.0), 28.0),
        (Vec3::new(-0.1, -0.3, -0.95).normalized(), Rgb::new(4.0, 4.0, 1.5), 20.0),
    ];
    EnvironmentMap::from_fn(32, 64, move |d| {
        let mut v = Rgb::splat(0.22);
        for (dir, color, sharp) in &spots {
            v += *color * ((d.dot(*dir) - 1.0) * sharp).exp();
        }
        v
    })
}

/// Two overlapping density blobs, a point light and the sky: the canonical
/// cache-training and variance scene.
pub fn two_blob() -> Scene {
    Scene {
        density: DensityField::GaussianBlobs {
            blobs: vec![
                GaussianBlob { center: Vec3::new(-0.35, 0.1, -0.05), peak: 5.0, radius: 0.34 },
                GaussianBlob { center: Vec3::new(0.4, -0.1, 0.15), peak: 4.0, radius: 0.4 },
            ],
        },
        materials: MaterialField::constant(0.15, 0.45, Rgb::new(0.7, 0.55, 0.4)),
        emitters: vec![
            Emitter::SphericalArea {
                position: Vec3::new(0.55, 0.65, 0.85),
                radius: 0.22,
                radiance: Rgb::new(8.0, 7.6, 7.0),
            },
            Emitter::SphericalArea {
                position: Vec3::new(-0.75, -0.55, 0.6),
                radius: 0.18,
                radiance: Rgb::new(3.5, 5.5, 8.5),
            },
        ],
        environment: sky_env(),
        emission: Rgb::ZERO,
        camera: Some(default_camera(64, 64)),
        t_far: 4.0,
    }
}

/// A floor slab, a bright point light above, and a half-plane occluder that
/// shadows the x < 0 side of the floor: the occlusion-aware sampling scene.
pub fn occluder() -> Scene {
    // floor: steep density ramp rising below z = -0.3 (normals point +z);
    // occluder: slab covering x in [-1.1, -0.02], z in [0.32, 0.42]
    let n = 28;
    let mut values = vec![0.0; n * n * n];
    let idx = |i: usize, j: usize, k: usize| i + n * (j + n * k);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let x = -1.1 + 2.2 * i as f64 / (n - 1) as f64;
                let z = -1.1 + 2.2 * k as f64 / (n - 1) as f64;
                let floor = 60.0 * ((-0.3 - z) / 0.15).clamp(0.0, 1.0);
                let blocker = if (-1.05..=-0.25).contains(&x) {
                    150.0 * (1.0 - ((z - 0.37).abs() / 0.12).min(1.0))
                } else {
                    0.0
                };
                values[idx(i, j, k)] = floor + blocker;
            }
        }
    }
    Scene {
        density: DensityField::Grid(crate::scene::DensityGrid {
            resolution: [n; 3],
            min: Vec3::splat(-1.1),
            max: Vec3::splat(1.1),
            values,
        }),
        materials: MaterialField::constant(0.0, 0.9, Rgb::splat(0.75)),
        emitters: vec![Emitter::SphericalArea {
            position: Vec3::new(-0.45, 0.0, 0.9),
            radius: 0.12,
            radiance: Rgb::splat(35.0),
        }],
        environment: EnvironmentMap::constant(8, 16, Rgb::splat(0.02)),
        emission: Rgb::ZERO,
        camera: Some(Camera {
            position: Vec3::new(0.0, -2.2, 1.3),
            look_at: Vec3::new(0.0, 0.0, -0.3),
            up: Vec3::new(0.0, 0.0, 1.0),
            fov_y_deg: 45.0,
            width: 64,
            height: 64,
        }),
        t_far: 4.0,
    }
}

/// Shadowed and lit probe points on the occluder scene's floor, with the
/// light direction from each.
pub fn occluder_probes() -> (Vec3, Vec3, Vec3) {
    let light = Vec3::new(-0.45, 0.0, 0.9);
    let shadowed = Vec3::new(-0.6, 0.0, -0.34);
    let lit = Vec3::new(0.55, 0.0, -0.34);
    (shadowed, lit, light)
}

/// Dense gaussian "sphere" with given constant material under the spotted
/// environment; the inverse-rendering target scene.
pub fn material_sphere(metalness: f64, roughness: f64, albedo: Rgb) -> Scene {
    Scene {
        density: DensityField::GaussianBlobs {
            blobs: vec![GaussianBlob { center: Vec3::ZERO, peak: 40.0, radius: 0.42 }],
        },
        materials: MaterialField::constant(metalness, roughness, albedo),
        emitters: vec![],
        environment: spotted_env(),
        emission: Rgb::ZERO,
        camera: Some(default_camera(32, 32)),
        t_far: 4.0,
    }
}

pub fn diffuse_sphere() -> Scene {
    material_sphere(0.0, 1.0, Rgb::new(0.7, 0.3, 0.2))
}

pub fn glossy_sphere() -> Scene {
    material_sphere(1.0, 0.2, Rgb::new(0.85, 0.7, 0.45))
}

/// Empty scene under a constant environment.
pub fn vacuum(env: Rgb) -> Scene {
    Scene {
        density: DensityField::GaussianBlobs { blobs: vec![] },
        materials: MaterialField::constant(0.0, 1.0, Rgb::splat(0.5)),
        emitters: vec![],
        environment: EnvironmentMap::default_resolution(env),
        emission: Rgb::ZERO,
        camera: Some(default_camera(16, 16)),
        t_far: 4.0,
    }
}

/// Ring of look-at cameras around the origin (two elevation bands).
pub fn ring_cameras(count: usize, width: usize, height: usize) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let phi = i as f64 / count as f64 * 2.0 * std::f64::consts::PI;
            let elev = [0.12, 0.55, 1.05][i % 3];
            let r = 2.4;
            Camera {
                position: Vec3::new(r * phi.cos(), r * phi.sin(), elev),
                look_at: Vec3::ZERO,
                up: Vec3::new(0.0, 0.0, 1.0),
                fov_y_deg: 38.0,
                width,
                height,
            }
        })
        .collect()
}

/// Looks a builtin up by name.
pub fn by_name(name: &str) -> Option<Scene> {
    match name {
        "two_blob" => Some(two_blob()),
        "occluder" => Some(occluder()),
        "diffuse_sphere" => Some(diffuse_sphere()),
        "glossy_sphere" => Some(glossy_sphere()),
        "vacuum" => Some(vacuum(Rgb::splat(0.5))),
        _ => None,
    }
}

pub fn names() -> &'static [&'static str] {
    &["two_blob", "occluder", "diffuse_sphere", "glossy_sphere", "vacuum"]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in names() {
            let scene = by_name(name).unwrap();
            scene.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn occluder_shadow_geometry() {
        let scene = occluder();
        let (shadowed, lit, light) = occluder_probes();
        // transmittance toward the light: blocked from the shadowed probe,
        // clear from the lit probe
        let t_shadow = crate::volume::transmittance(&scene.density, shadowed, light, 64);
        let t_lit = crate::volume::transmittance(&scene.density, lit, light, 64);
        // the lit probe self-attenuates through its own floor ramp; the
        // occluder must add orders of magnitude on top of that
        assert!(t_lit > 0.25, "lit probe is blocked: T = {t_lit}");
        assert!(t_shadow < 1e-3 * t_lit, "weak shadow: {t_shadow} vs lit {t_lit}");
        // both probes sit on the floor with upward normals
        for p in [shadowed, lit] {
            let n = scene.density.derived_normal(p).unwrap();
            assert!(n.z > 0.9, "floor normal at {p:?}: {n:?}");
        }
    }
}
