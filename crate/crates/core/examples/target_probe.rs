use candela_core::cache::*;
use candela_core::math::Vec3;
use candela_core::presets;
use candela_core::rng::{Purpose, RngStream};

fn main() {
    let scene = presets::occluder();
    let ref_cfg = ReferenceCacheConfig::default();
    let mut rng = RngStream::new(5).purpose(Purpose::Fitting);
    let mut all = Vec::new();
    let mut hits = 0;
    let n_points = 200;
    let n_dirs = 64;
    for _ in 0..n_points {
        let x = scene.sample_near_surface(&mut rng);
        for _ in 0..n_dirs {
            let z = rng.uniform(-1.0, 1.0);
            let phi = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
            let s = (1.0f64 - z * z).max(0.0).sqrt();
            let d = Vec3::new(s * phi.cos(), s * phi.sin(), z);
            let tap = reference_cache_query(&scene, x, d, &ref_cfg);
            let t = tap.radiance.norm();
            if tap.emitter.norm() > 1.0 { hits += 1; }
            all.push(t);
        }
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = all.len();
    println!("targets: n={n}, emitter hits={hits} ({:.3}%)", 100.0 * hits as f64 / n as f64);
    for q in [0.5, 0.9, 0.99, 0.999, 1.0] {
        let i = ((n as f64 - 1.0) * q) as usize;
        println!("  P{:>5.1}: {:.4}", q * 100.0, all[i]);
    }
    println!("  mean: {:.4}", all.iter().sum::<f64>() / n as f64);
}
