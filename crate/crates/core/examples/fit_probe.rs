// Scratch driver for cache-training and vMF-fit quality; not a test.
use candela_core::cache::*;
use candela_core::math::{Rgb, Vec3};
use candela_core::optimize::{fit_vmf_field, VmfFitConfig};
use candela_core::presets;
use candela_core::rng::{Purpose, RngStream};
use candela_core::vmf::VmfParamField;
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "cache".into());
    if which == "cache" {
        let scene = presets::two_blob();
        let ref_cfg = ReferenceCacheConfig::default();
        let mut rng = RngStream::new(42).purpose(Purpose::Init);
        let mut cache = FastCache::init(FastCacheShape::for_scene(&scene), &mut rng);
        for (steps, lr) in [(1500usize, 8e-3), (1500, 3e-3), (1000, 1e-3)] {
            let t = Instant::now();
            let trace = train_fast_cache(
                &mut cache,
                &scene,
                &ref_cfg,
                &TrainConfig { steps, batch: 64, lr, seed: 7 },
            )
            .unwrap();
            let err = relative_l2_error(&cache, &scene, &ref_cfg, 10_000, 99);
            println!(
                "after +{steps} steps (lr {lr}): loss {:.5}, rel L2 {:.4} ({:?})",
                trace.losses.last().unwrap(),
                err,
                t.elapsed()
            );
        }
    } else if which == "vacuum" {
        // single point light in vacuum: the dominant lobe should project to
        // the light direction from any query point
        let mut scene = presets::vacuum(Rgb::ZERO);
        scene.emitters = vec![candela_core::scene::Emitter::Point {
            position: Vec3::new(0.4, -0.3, 0.7),
            intensity: Rgb::splat(2.0),
        }];
        let ref_cfg = ReferenceCacheConfig::default();
        let kappa0: f64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(2.0);
        let lr: f64 = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(0.05);
        let steps: usize = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(2000);
        let mut rng = RngStream::new(5).purpose(Purpose::Init);
        let mut field = VmfParamField::init_with(4, None, scene.bounds(), kappa0, 1.0, &mut rng);
        let trace = fit_vmf_field(
            &mut field,
            &scene,
            &ref_cfg,
            &VmfFitConfig { steps, points_per_step: 16, samples_per_point: 48, lr, seed: 3, ..Default::default() },
        )
        .unwrap();
        println!("loss {:.4} -> {:.4}", trace[0], trace.last().unwrap());
        let x = Vec3::new(-0.2, 0.1, -0.3);
        let light_dir = (Vec3::new(0.4, -0.3, 0.7) - x).normalized();
        let mix = field.mixture_at(x);
        for (i, l) in mix.lobes.iter().enumerate() {
            println!(
                "lobe {i}: lambda {:.3} kappa {:.1} angle-to-light {:.2} deg",
                l.lambda,
                l.kappa,
                l.mu.dot(light_dir).clamp(-1.0, 1.0).acos().to_degrees()
            );
        }
    } else {
        let scene = presets::occluder();
        let ref_cfg = ReferenceCacheConfig::default();
        let (shadowed, lit, light) = presets::occluder_probes();
        let kappa0: f64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(2.0);
        let lr: f64 = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(0.05);
        let steps: usize = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(2000);
        let mut rng = RngStream::new(5).purpose(Purpose::Init);
        let mut field = VmfParamField::init_with(4, Some([8, 8, 8]), scene.bounds(), kappa0, 1.0, &mut rng);
        let t = Instant::now();
        let trace = fit_vmf_field(
            &mut field,
            &scene,
            &ref_cfg,
            &VmfFitConfig { steps, points_per_step: 24, samples_per_point: 32, lr, seed: 3, ..Default::default() },
        )
        .unwrap();
        println!("fit in {:?}, loss {:.4} -> {:.4}", t.elapsed(), trace[0], trace.last().unwrap());
        // criterion-6 style variance comparison on floor pixels
        use candela_core::estimator::*;
        let reference = ReferenceCacheView { scene: &scene, cfg: ref_cfg };
        let trials = 300;
        let spp = 16;
        let mut ratios = Vec::new();
        let mut var_pairs = (0.0, 0.0);
        for px in 0..16 {
            let x = Vec3::new(-0.8 + 1.5 * px as f64 / 15.0, 0.1, -0.34);
            let Some(frame) = scene.shading_frame(x, Vec3::new(0.0, 0.0, 1.0)) else { continue };
            let pt = ShadePoint { x, frame, wo: Vec3::new(0.0, 0.0, 1.0), params: scene.materials.params_at(x) };
            let run = |vmf: Option<&VmfParamField>, salt: u64| {
                let sampler = SamplerCtx {
                    settings: if vmf.is_some() { candela_core::brdf::SamplerSettings::default() } else { candela_core::brdf::SamplerSettings::cosine_only() },
                    vmf,
                    lobes: LobeMask::DiffuseOnly,
                };
                collect_trials(trials, |t| {
                    let rng = RngStream::new(900 + salt).substream(px as u64).substream(t as u64).purpose(Purpose::Trial);
                    estimate_lo_plain(&pt, &reference, spp, &sampler, &rng).unwrap().0.value
                })
            };
            let with = run(Some(&field), 1).variance().sum();
            let without = run(None, 2).variance().sum();
            ratios.push(without / with.max(1e-30));
            var_pairs.0 += without;
            var_pairs.1 += with;
        }
        println!("variance ratios per pixel: {:?}", ratios.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>());
        println!("aggregate cosine/vmf variance ratio: {:.3}", var_pairs.0 / var_pairs.1);
        let dir_s = (light - shadowed).normalized();
        let dir_l = (light - lit).normalized();
        let p_shadow = field.mixture_pdf(shadowed, dir_s);
        let p_lit = field.mixture_pdf(lit, dir_l);
        println!("pdf toward light: shadowed {p_shadow:.5}, lit {p_lit:.5}, ratio {:.4}", p_shadow / p_lit);
        // lobe means at the lit probe
        let mix = field.mixture_at(lit);
        for (i, l) in mix.lobes.iter().enumerate() {
            let angle = l.mu.dot(dir_l).clamp(-1.0, 1.0).acos().to_degrees();
            println!(
                "lobe {i}: lambda {:.3} kappa {:.1} angle-to-light {:.1} deg",
                l.lambda, l.kappa, angle
            );
        }
        let _ = Rgb::ZERO;
        let _ = Vec3::ZERO;
    }
}

// (vacuum probe appended as a third mode handled in main via "vacuum" arg)
