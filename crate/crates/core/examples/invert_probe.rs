// Scratch driver for tuning the desk-scale inversion; not part of the test
// suite. Run with: cargo run --release -p candela-core --example invert_probe
use candela_core::brdf::MaterialField;
use candela_core::math::Rgb;
use candela_core::optimize::{invert_scene, render_training_rays, InvertConfig};
use candela_core::presets;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let which = std::env::args().nth(1).unwrap_or_else(|| "diffuse".into());
    let truth_scene = if which == "glossy" { presets::glossy_sphere() } else { presets::diffuse_sphere() };
    let cameras = presets::ring_cameras(16, 32, 32);
    let images = render_training_rays(&truth_scene, &cameras, 32, 8, 77);
    println!("targets rendered: {} rays in {:?}", images.len(), t0.elapsed());

    let mut initial = truth_scene.clone();
    initial.materials = MaterialField::constant(0.5, 0.5, Rgb::splat(0.5));
    let cfg = InvertConfig::default();
    let t1 = Instant::now();
    let out = invert_scene(&initial, &images, Some(&truth_scene.materials), &cfg).unwrap();
    println!("stage1+2 in {:?}", t1.elapsed());
    for row in out.trace.iter().step_by(100) {
        println!(
            "step {:4}  photo {:+.5}  err m {:.3} r {:.3} a {:.3}",
            row.step, row.photometric, row.param_err_m, row.param_err_r, row.param_err_a
        );
    }
    let last = out.trace.last().unwrap();
    println!(
        "final: err m {:.4} r {:.4} a {:.4}",
        last.param_err_m, last.param_err_r, last.param_err_a
    );
    let truth_p = truth_scene.materials.params_at(candela_core::Vec3::ZERO);
    let p = out.scene.materials.params_at(candela_core::Vec3::ZERO);
    println!("per-channel albedo err: {:.3} {:.3} {:.3}",
        (p.albedo.x - truth_p.albedo.x).abs(), (p.albedo.y - truth_p.albedo.y).abs(), (p.albedo.z - truth_p.albedo.z).abs());
    println!("recovered m={:.3} r={:.3} a=({:.3},{:.3},{:.3})", p.metalness, p.roughness, p.albedo.x, p.albedo.y, p.albedo.z);
    println!("total {:?}", t0.elapsed());
}
