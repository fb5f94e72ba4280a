//! Losses and the two-stage inverse-rendering loop.
//!
//! The photometric loss uses the gradient trick: two independent pixel
//! estimates A and B, with B (and the relative-weight divisor) detached, so
//! the expected gradient equals the gradient of the squared error of the
//! estimator's expectation. Regularizers (normal, smoothness, density L1)
//! are built on the same tape. Stage 1 fits the fast cache and the vMF
//! sampler against the reference cache; stage 2 optimizes the material
//! field (and optionally the far-field environment) while the cache and
//! sampler keep fitting on the same secondary rays the renderer drew.

use crate::autodiff::{AdamState, Tape, Var};
use crate::brdf::{diffuse_brdf_tape, specular_brdf_tape, MaterialField};
use crate::cache::{
    reference_cache_query, train_fast_cache, FastCache, FastCacheShape, ReferenceCacheConfig,
    TrainConfig,
};
use crate::estimator::{
    estimate_pixel, EstimatorConfig, FastCacheView, LobeKind, PixelCtx, PixelRecord,
    RadianceEstimate, ReferenceCacheView,
};
use crate::math::{Rgb, Vec3};
use crate::rng::{Purpose, RngStream};
use crate::scene::{EnvironmentMap, Ray, Scene};
use crate::vmf::{FitSample, VmfParamField};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("gradient-trick estimates share a sample stream (tag {tag:#x})")]
    SharedSampleStream { tag: u64 },
    #[error("stage-2 loss diverged at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error(transparent)]
    Estimator(#[from] crate::estimator::EstimatorError),
    #[error(transparent)]
    Brdf(#[from] crate::brdf::BrdfError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Vmf(#[from] crate::vmf::VmfError),
    #[error(transparent)]
    Cache(#[from] crate::cache::CacheError),
}

/// Regularizer weights; epsilon is the smoothness perturbation scale.
#[derive(Copy, Clone, Debug)]
pub struct LossWeights {
    pub c_normals: f64,
    pub c_brdf: f64,
    pub epsilon: f64,
    pub c_density: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { c_normals: 1.0, c_brdf: 0.05, epsilon: 0.01, c_density: 1e-4 }
    }
}

/// Parameter-id layout for the material/environment tape.
#[derive(Copy, Clone, Debug, Default)]
pub struct TapeBindings {
    pub material_base: usize,
    /// When set, environment texels are tape parameters at this base and
    /// gradients flow through the primary residual-transparency term.
    /// Cache taps hold their env contribution constant.
    pub env_base: Option<usize>,
}

fn env_on_tape(
    tape: &mut Tape,
    env: &EnvironmentMap,
    dir: Vec3,
    bind: &TapeBindings,
) -> [Var; 3] {
    match bind.env_base {
        None => {
            let v = env.radiance(dir);
            [tape.constant(v.x), tape.constant(v.y), tape.constant(v.z)]
        }
        Some(base) => {
            let taps = env.taps(dir);
            let mut out = [tape.constant(0.0); 3];
            for (c, slot) in out.iter_mut().enumerate() {
                let terms: Vec<(Var, f64)> = taps
                    .iter()
                    .map(|&(idx, w)| {
                        let id = base + idx * 3 + c;
                        (tape.param(id, env.data[idx * 3 + c]), w)
                    })
                    .collect();
                *slot = tape.dot_const(&terms);
            }
            out
        }
    }
}

/// Rebuilds a recorded pixel estimate on the tape with the BRDF (and
/// optionally the primary environment term) differentiable. The forward
/// value reproduces the recorded estimate.
pub fn pixel_on_tape(
    tape: &mut Tape,
    materials: &MaterialField,
    env: &EnvironmentMap,
    record: &PixelRecord,
    bind: &TapeBindings,
) -> [Var; 3] {
    let mut terms: [Vec<Var>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for sp in &record.surface {
        let mat = materials.params_on_tape(tape, sp.point.x, bind.material_base);
        let f_diffuse = diffuse_brdf_tape(tape, &mat);
        for r in &sp.samples {
            if r.scale == 0.0 {
                continue;
            }
            let f = match r.lobe {
                LobeKind::Diffuse => f_diffuse,
                LobeKind::Specular => {
                    match specular_brdf_tape(tape, &mat, &sp.point.frame, r.dir, sp.point.wo) {
                        Ok(f) => f,
                        Err(_) => continue, // grazing: contributed zero
                    }
                }
            };
            let s = r.scale * sp.multiplier;
            for c in 0..3 {
                terms[c].push(tape.scale(f[c], r.li.get(c) * s));
            }
        }
    }
    let e = env_on_tape(tape, env, record.primary_dir, bind);
    let mut out = [tape.constant(0.0); 3];
    for c in 0..3 {
        terms[c].push(tape.scale(e[c], record.tau));
        out[c] = tape.sum(&terms[c]);
    }
    out
}

/// The fast-only component of a recorded control-variate pixel estimate
/// (the M'-tap term plus the environment), used as the detached
/// relative-weight divisor of the photometric loss.
pub fn pixel_fast_component(record: &PixelRecord, env: &EnvironmentMap) -> Rgb {
    let mut acc = env.radiance(record.primary_dir) * record.tau;
    for sp in &record.surface {
        for r in &sp.samples {
            if r.scale == 0.0 || r.li_ref.is_some() {
                continue; // keep only the fast-only (M') samples
            }
            if let Some(f) = match r.lobe {
                LobeKind::Diffuse => Some(crate::brdf::diffuse_brdf(&sp.point.params)),
                LobeKind::Specular => {
                    crate::brdf::specular_brdf(&sp.point.params, &sp.point.frame, r.dir, sp.point.wo)
                        .ok()
                }
            } {
                acc += f.component_mul(r.li) * (r.scale * sp.multiplier);
            }
        }
    }
    acc
}

/// Photometric gradient-trick loss:
/// sum_c 2 (target - A)_c * sg(target - B)_c / sg(lum_c + 1e-3).
/// B and the luminance divisor enter as constants (their stop-gradient).
/// Errors when the two estimates share a sample stream.
pub fn photometric_gradient_trick(
    tape: &mut Tape,
    a_value: [Var; 3],
    a: &RadianceEstimate,
    b: &RadianceEstimate,
    target: Rgb,
    cache_luminance: Rgb,
) -> Result<Var, OptimizeError> {
    if a.stream_tag == b.stream_tag {
        return Err(OptimizeError::SharedSampleStream { tag: a.stream_tag });
    }
    let mut terms = Vec::with_capacity(3);
    for c in 0..3 {
        let t = target.get(c);
        let resid_a = tape.neg(a_value[c]);
        let resid_a = tape.add_const(resid_a, t); // (t - A)
        let w = 2.0 * (t - b.value.get(c)) / (cache_luminance.get(c) + 1e-3);
        terms.push(tape.scale(resid_a, w));
    }
    Ok(tape.sum(&terms))
}

/// C_normals * sum_k w_k || n_pred_k - n_derived_k ||^2.
pub fn normal_loss(
    tape: &mut Tape,
    c_normals: f64,
    weights: &[f64],
    predicted: &[[Var; 3]],
    derived: &[Vec3],
) -> Var {
    assert_eq!(weights.len(), predicted.len());
    assert_eq!(weights.len(), derived.len());
    let mut terms = Vec::with_capacity(weights.len());
    for ((&w, p), d) in weights.iter().zip(predicted).zip(derived) {
        let mut sq = Vec::with_capacity(3);
        for c in 0..3 {
            let diff = tape.add_const(p[c], -d.get(c));
            sq.push(tape.square(diff));
        }
        let s = tape.sum(&sq);
        terms.push(tape.scale(s, w));
    }
    let total = tape.sum(&terms);
    tape.scale(total, c_normals)
}

/// Relative-difference smoothness with pseudo-albedo weighting:
/// C_BRDF * sum_k w_k sum_beta |beta(x) - beta(x+xi)| /
///   max(beta(x), beta(x+xi), 1e-4) * lambda, xi ~ N(0, eps^2 I).
/// The pseudo-albedo factor lambda is detached.
pub fn smoothness_loss(
    tape: &mut Tape,
    materials: &MaterialField,
    material_base: usize,
    points: &[(Vec3, f64)],
    pseudo_albedo: &dyn Fn(Vec3) -> Rgb,
    weights: &LossWeights,
    rng: &mut RngStream,
) -> Var {
    let mut terms = Vec::new();
    for &(x, w) in points {
        if weights.epsilon == 0.0 {
            continue;
        }
        let xi = Vec3::new(rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian())
            * weights.epsilon;
        let x2 = x + xi;
        let lambda = {
            let d = (pseudo_albedo(x) - pseudo_albedo(x2)).abs();
            d.mean()
        };
        if lambda == 0.0 {
            continue;
        }
        let a = materials.params_on_tape(tape, x, material_base);
        let b = materials.params_on_tape(tape, x2, material_base);
        let channels = [
            (a.metalness, b.metalness),
            (a.roughness, b.roughness),
            (a.albedo[0], b.albedo[0]),
            (a.albedo[1], b.albedo[1]),
            (a.albedo[2], b.albedo[2]),
        ];
        let floor = tape.constant(1e-4);
        for (pa, pb) in channels {
            let diff = tape.sub(pa, pb);
            let num = tape.abs(diff);
            let m = tape.max(pa, pb);
            let m = tape.max(m, floor);
            let rel = tape.div(num, m).expect("max with 1e-4 floor is positive");
            terms.push(tape.scale(rel, w * lambda));
        }
    }
    let total = tape.sum(&terms);
    tape.scale(total, weights.c_brdf)
}

/// C_density * sum |raw grid values| (zero for analytic density variants);
/// the subgradient at zero is zero via the abs op.
pub fn density_l1(
    tape: &mut Tape,
    density: &crate::scene::DensityField,
    density_base: usize,
    c_density: f64,
) -> Var {
    match density {
        crate::scene::DensityField::Grid(g) => {
            let mut terms = Vec::with_capacity(g.values.len());
            for (i, &v) in g.values.iter().enumerate() {
                let p = tape.param(density_base + i, v);
                terms.push(tape.abs(p));
            }
            let total = tape.sum(&terms);
            tape.scale(total, c_density)
        }
        _ => tape.constant(0.0),
    }
}

/// Sum of whatever loss components are enabled.
pub fn total_loss(tape: &mut Tape, components: &[Option<Var>]) -> Var {
    let present: Vec<Var> = components.iter().flatten().copied().collect();
    tape.sum(&present)
}

// ---------------------------------------------------------------------------
// gradient-trick toy model
// ---------------------------------------------------------------------------

/// Outcome of the toy-model comparison between the gradient trick and the
/// naive single-sample squared error.
#[derive(Clone, Debug)]
pub struct ToyOutcome {
    pub analytic: f64,
    pub trick_mean: f64,
    pub trick_se: f64,
    pub naive_mean: f64,
    pub naive_se: f64,
}

/// Toy estimator L(theta) = theta (1 + s eps), target 0, unit weight: the
/// objective (target - E L)^2 has gradient 2 theta; the naive per-sample
/// loss has expected gradient 2 theta (1 + s^2) because the estimator's
/// variance depends on theta.
pub fn gradient_trick_toy(trials: usize, theta: f64, noise: f64, seed: u64) -> ToyOutcome {
    use rayon::prelude::*;
    let root = RngStream::new(seed).purpose(Purpose::Trial);
    let grads: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = root.substream(t as u64);
            let ea = rng.next_gaussian() * noise;
            let eb = rng.next_gaussian() * noise;
            let mut tape = Tape::new();
            let th = tape.param(0, theta);
            let a = tape.scale(th, 1.0 + ea);
            let b = tape.scale(th, 1.0 + eb);
            // trick: 2 (0 - A) * sg(0 - B)
            let na = tape.neg(a);
            let nb = tape.neg(b);
            let sg = tape.stop_grad(nb);
            let prod = tape.mul(na, sg);
            let trick = tape.scale(prod, 2.0);
            let g_trick = tape.backward(trick)[0];
            // naive: (0 - A)^2 on the same draw
            let naive = tape.square(na);
            let g_naive = tape.backward(naive)[0];
            (g_trick, g_naive)
        })
        .collect();
    let mut trick = crate::stats::Welford::new();
    let mut naive = crate::stats::Welford::new();
    for (gt, gn) in grads {
        trick.push(gt);
        naive.push(gn);
    }
    ToyOutcome {
        analytic: 2.0 * theta,
        trick_mean: trick.mean(),
        trick_se: trick.std_error(),
        naive_mean: naive.mean(),
        naive_se: naive.std_error(),
    }
}

// ---------------------------------------------------------------------------
// vMF sampler fitting
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct VmfFitConfig {
    pub steps: usize,
    pub points_per_step: usize,
    pub samples_per_point: usize,
    /// When the scene has a camera, fit at shading points selected along
    /// camera rays (where rendering will actually query the sampler);
    /// otherwise fall back to near-surface sampling.
    pub use_camera_points: bool,
    pub lr: f64,
    /// Learning-rate multiplier for the concentration/weight channels.
    /// Lobe positions move in scene units; kappa_raw and lambda_raw must
    /// travel tens to hundreds of softplus units to represent bright
    /// compact lights, so they get a faster rate.
    pub lr_shape_scale: f64,
    pub seed: u64,
}

impl Default for VmfFitConfig {
    fn default() -> Self {
        VmfFitConfig {
            steps: 2000,
            points_per_step: 16,
            samples_per_point: 16,
            use_camera_points: true,
            lr: 0.05,
            lr_shape_scale: 25.0,
            seed: 11,
        }
    }
}

/// Fits the spatially-varying mixture to the reference cache's incoming
/// radiance: points are drawn near surfaces, directions come from the same
/// combined sampler the renderer uses (so the fit sees its own blind
/// spots), and the target is the L2 norm of the incident radiance.
pub fn fit_vmf_field(
    field: &mut VmfParamField,
    scene: &Scene,
    ref_cfg: &ReferenceCacheConfig,
    cfg: &VmfFitConfig,
) -> Result<Vec<f64>, OptimizeError> {
    use rayon::prelude::*;
    let mut adam = AdamState::new(field.raw().len());
    let mut trace = Vec::with_capacity(cfg.steps);
    let root = RngStream::new(cfg.seed).purpose(Purpose::Fitting);
    let settings = crate::brdf::SamplerSettings::default();
    for step in 0..cfg.steps {
        let step_rng = root.substream(step as u64);
        let frozen: &VmfParamField = field;
        let results: Vec<Option<(f64, Vec<(u32, f64)>)>> = (0..cfg.points_per_step)
            .into_par_iter()
            .map(|p| {
                let mut rng = step_rng.substream(p as u64);
                let x = match (&scene.camera, cfg.use_camera_points) {
                    (Some(cam), true) => {
                        // a shading point on a random camera ray, drawn from
                        // the same categorical the renderer uses
                        let px = rng.next_usize(cam.width);
                        let py = rng.next_usize(cam.height);
                        let ray = cam.ray(px, py, scene.t_far);
                        let partition =
                            crate::volume::stratified_partition(&ray, 48, &mut rng);
                        let weights =
                            crate::volume::quadrature_weights(&scene.density, &ray, &partition);
                        let picks = crate::volume::sample_surface_points(&weights, 1, &mut rng);
                        match picks.first() {
                            Some(pick) => weights.positions[pick.index],
                            None => scene.sample_near_surface(&mut rng),
                        }
                    }
                    _ => scene.sample_near_surface(&mut rng),
                };
                let frame = scene.density.derived_normal(x).map(crate::math::ShadingFrame::from_normal);
                let mut samples = Vec::with_capacity(cfg.samples_per_point);
                for _ in 0..cfg.samples_per_point {
                    let (dir, pdf) = match &frame {
                        // at shading points, the renderer's own diffuse sampler
                        Some(f) => {
                            let s = crate::brdf::sample_diffuse(
                                Some((frozen, x)),
                                f,
                                &settings,
                                &mut rng,
                            );
                            (s.dir, s.pdf)
                        }
                        // free space: half mixture, half uniform sphere
                        None => {
                            let dir = if rng.next_f64() < 0.5 {
                                frozen.sample(x, &mut rng).0
                            } else {
                                let z = rng.uniform(-1.0, 1.0);
                                let phi = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
                                let s = (1.0 - z * z).max(0.0).sqrt();
                                Vec3::new(s * phi.cos(), s * phi.sin(), z)
                            };
                            let pdf = 0.5 * frozen.mixture_pdf(x, dir) + 0.5 * crate::vmf::INV_4PI;
                            (dir, pdf)
                        }
                    };
                    let li = reference_cache_query(scene, x, dir, ref_cfg).radiance;
                    samples.push(FitSample { dir, pdf, target: li.norm() });
                }
                let mut tape = Tape::new();
                let loss = frozen.fit_loss_tape(&mut tape, x, &samples).ok()?;
                Some((tape.value(loss), tape.backward_sparse(loss)))
            })
            .collect();

        let mut grads = vec![0.0; field.raw().len()];
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        for r in results.into_iter().flatten() {
            loss_sum += r.0;
            for (id, g) in r.1 {
                grads[id as usize] += g;
            }
            used += 1;
        }
        if used == 0 {
            trace.push(f64::NAN);
            continue;
        }
        for g in grads.iter_mut() {
            *g /= used as f64;
        }
        let loss = loss_sum / used as f64;
        if !loss.is_finite() {
            return Err(OptimizeError::NonFiniteLoss { step, loss });
        }
        trace.push(loss);
        // linear decay over the second half keeps the fitted field from
        // wandering once the lobes have locked on
        let half = cfg.steps / 2;
        let lr = if step < half {
            cfg.lr
        } else {
            let t = (step - half) as f64 / (cfg.steps - half).max(1) as f64;
            cfg.lr * (1.0 - 0.8 * t)
        };
        let shape_scale = cfg.lr_shape_scale;
        adam.step_scaled(field.raw_mut(), &grads, lr, |i| {
            if i % 5 >= 3 {
                shape_scale
            } else {
                1.0
            }
        });
        field.clamp_raw();
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// inverse rendering
// ---------------------------------------------------------------------------

/// One training pixel: camera ray, measured color, and a stable id used for
/// stream seeding.
#[derive(Clone, Debug)]
pub struct TrainingRay {
    pub ray: Ray,
    pub target: Rgb,
    pub pixel_id: u64,
}

#[derive(Clone, Debug)]
pub struct InvertConfig {
    pub stage1_cache: TrainConfig,
    pub stage1_vmf: VmfFitConfig,
    pub use_vmf_sampler: bool,
    pub vmf_lobes: usize,
    pub stage2_steps: usize,
    pub batch: usize,
    pub lr_materials: f64,
    pub lr_env: f64,
    pub lr_cache: f64,
    pub lr_vmf: f64,
    pub m: usize,
    pub m_prime: usize,
    pub k: usize,
    pub n_primary: usize,
    pub optimize_env: bool,
    /// How many rays per step continue fitting the cache and the sampler.
    pub fit_rays_per_step: usize,
    pub weights: LossWeights,
    pub ref_cfg: ReferenceCacheConfig,
    pub seed: u64,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig {
            stage1_cache: TrainConfig { steps: 1000, batch: 48, lr: 5e-3, seed: 31 },
            stage1_vmf: VmfFitConfig { steps: 300, seed: 32, ..Default::default() },
            use_vmf_sampler: true,
            vmf_lobes: 8,
            stage2_steps: 6500,
            batch: 56,
            lr_materials: 2.5e-2,
            lr_env: 5e-3,
            lr_cache: 1e-3,
            lr_vmf: 1e-2,
            m: 4,
            m_prime: 24,
            k: 1,
            n_primary: 32,
            optimize_env: false,
            fit_rays_per_step: 4,
            weights: LossWeights::default(),
            ref_cfg: ReferenceCacheConfig::default(),
            seed: 1234,
        }
    }
}

/// Per-step trace row matching the CSV the CLI emits.
#[derive(Clone, Debug)]
pub struct InvertStepTrace {
    pub step: usize,
    pub photometric: f64,
    pub normal: f64,
    pub smooth: f64,
    pub density: f64,
    pub param_err_m: f64,
    pub param_err_r: f64,
    pub param_err_a: f64,
}

impl InvertStepTrace {
    pub fn csv_header() -> &'static str {
        "step,photometric,normal,smooth,density,param_err_m,param_err_r,param_err_a"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.photometric,
            self.normal,
            self.smooth,
            self.density,
            self.param_err_m,
            self.param_err_r,
            self.param_err_a
        )
    }
}

pub struct InvertOutcome {
    /// Scene carrying the recovered materials (and environment).
    pub scene: Scene,
    pub cache: FastCache,
    pub vmf: VmfParamField,
    pub trace: Vec<InvertStepTrace>,
}

/// Mean decoded-parameter error against ground truth over dense probe
/// points (where sigma > half max).
pub fn material_error(
    scene: &Scene,
    recovered: &MaterialField,
    truth: &MaterialField,
    seed: u64,
) -> (f64, f64, f64) {
    let mut rng = RngStream::new(seed).purpose(Purpose::Misc);
    let sigma_max = scene.density.max_density();
    let mut count = 0usize;
    let (mut em, mut er, mut ea) = (0.0, 0.0, 0.0);
    let mut guard = 0;
    while count < 256 && guard < 100_000 {
        guard += 1;
        let x = scene.sample_in_bounds(&mut rng);
        if scene.density.value(x) <= 0.5 * sigma_max {
            continue;
        }
        let a = recovered.params_at(x);
        let b = truth.params_at(x);
        em += (a.metalness - b.metalness).abs();
        er += (a.roughness - b.roughness).abs();
        ea += (a.albedo - b.albedo).abs().mean();
        count += 1;
    }
    let n = count.max(1) as f64;
    (em / n, er / n, ea / n)
}

/// Renders the training images for an inversion experiment with the plain
/// reference estimator.
pub fn render_training_rays(
    scene: &Scene,
    cameras: &[crate::scene::Camera],
    spp: usize,
    m: usize,
    seed: u64,
) -> Vec<TrainingRay> {
    let cfg = EstimatorConfig { use_cv: false, m, ..Default::default() };
    let mut out = Vec::new();
    for (ci, cam) in cameras.iter().enumerate() {
        let img = crate::render::render_reference(scene, cam, cfg, None, spp, seed ^ (ci as u64) << 32);
        for py in 0..cam.height {
            for px in 0..cam.width {
                out.push(TrainingRay {
                    ray: cam.ray(px, py, scene.t_far),
                    target: img.pixels[py * cam.width + px],
                    pixel_id: ((ci * cam.height + py) * cam.width + px) as u64,
                });
            }
        }
    }
    out
}

/// Two-stage inverse rendering. Geometry (density) is frozen; stage 1 fits
/// the fast cache and the vMF sampler to the reference cache of the initial
/// scene, stage 2 jointly optimizes materials (and optionally the
/// environment) through the gradient-trick photometric loss plus
/// regularizers, while cache and sampler continue fitting on the renderer's
/// own secondary rays.
pub fn invert_scene(
    initial: &Scene,
    images: &[TrainingRay],
    truth: Option<&MaterialField>,
    cfg: &InvertConfig,
) -> Result<InvertOutcome, OptimizeError> {
    use rayon::prelude::*;
    let mut scene = initial.clone();
    let root = RngStream::new(cfg.seed);

    // stage 1: cache + sampler against the reference of the initial scene
    let mut cache = FastCache::init(
        FastCacheShape::for_scene(&scene),
        &mut root.substream(1).purpose(Purpose::Init),
    );
    train_fast_cache(&mut cache, &scene, &cfg.ref_cfg, &cfg.stage1_cache)?;
    let mut vmf = VmfParamField::init(
        cfg.vmf_lobes,
        None,
        scene.bounds(),
        &mut root.substream(2).purpose(Purpose::Init),
    );
    if cfg.use_vmf_sampler {
        fit_vmf_field(&mut vmf, &scene, &cfg.ref_cfg, &cfg.stage1_vmf)?;
    }

    // stage 2
    let mat_len = scene.materials.raw().len();
    let env_len = scene.environment.data.len();
    let bind = TapeBindings {
        material_base: 0,
        env_base: if cfg.optimize_env { Some(mat_len) } else { None },
    };
    let scene_param_len = mat_len + if cfg.optimize_env { env_len } else { 0 };
    let mut adam_materials = AdamState::new(mat_len);
    let mut adam_env = AdamState::new(if cfg.optimize_env { env_len } else { 0 });
    let mut adam_cache = AdamState::new(cache.param_count());
    let mut adam_vmf = AdamState::new(vmf.raw().len());
    let mut trace = Vec::with_capacity(cfg.stage2_steps);

    struct RayResult {
        photometric: f64,
        smooth: f64,
        scene_grads: Vec<(u32, f64)>,
        cache_grads: Vec<(u32, f64)>,
        vmf_grads: Vec<(u32, f64)>,
        cache_loss_used: bool,
    }

    for step in 0..cfg.stage2_steps {
        let step_rng = root.substream(3).substream(step as u64);
        let est_cfg = EstimatorConfig {
            m: cfg.m,
            m_prime: cfg.m_prime,
            k: cfg.k,
            n_primary: cfg.n_primary,
            use_cv: true,
            ..Default::default()
        };
        let scene_ref = &scene;
        let cache_ref = &cache;
        let vmf_ref = &vmf;
        let weights = cfg.weights;
        let results: Vec<Result<RayResult, OptimizeError>> = (0..cfg.batch)
            .into_par_iter()
            .map(|b| {
                let mut pick_rng = step_rng.substream(0xbeef ^ b as u64);
                let train = &images[pick_rng.next_usize(images.len())];
                let reference = ReferenceCacheView { scene: scene_ref, cfg: cfg.ref_cfg };
                let fast_view = FastCacheView::new(cache_ref, scene_ref);
                let ctx = PixelCtx {
                    scene: scene_ref,
                    reference: &reference,
                    fast: Some(&fast_view),
                    vmf: if cfg.use_vmf_sampler { Some(vmf_ref) } else { None },
                    cfg: est_cfg,
                };
                let ray_rng = step_rng.substream(train.pixel_id);
                let (est_a, rec_a) = estimate_pixel(&ctx, &train.ray, &ray_rng.substream(0xA))?;
                let (est_b, _) = estimate_pixel(&ctx, &train.ray, &ray_rng.substream(0xB))?;

                // materials/env tape: photometric + smoothness
                let mut tape = Tape::new();
                let a_vars = pixel_on_tape(&mut tape, &scene_ref.materials, &scene_ref.environment, &rec_a, &bind);
                let lum = pixel_fast_component(&rec_a, &scene_ref.environment);
                let photo =
                    photometric_gradient_trick(&mut tape, a_vars, &est_a, &est_b, train.target, lum)?;
                let smooth_points: Vec<(Vec3, f64)> =
                    rec_a.surface.iter().map(|sp| (sp.point.x, sp.multiplier)).collect();
                let fast_albedo = |x: Vec3| -> Rgb {
                    // pseudo-albedo: outgoing fast color over a cheap
                    // cosine-weighted irradiance estimate
                    irradiance_pseudo_albedo(scene_ref, cache_ref, x)
                };
                let mut smooth_rng = ray_rng.substream(0x5);
                let smooth = smoothness_loss(
                    &mut tape,
                    &scene_ref.materials,
                    bind.material_base,
                    &smooth_points,
                    &fast_albedo,
                    &weights,
                    &mut smooth_rng,
                );
                let loss = tape.add(photo, smooth);
                let scene_grads = tape.backward_sparse(loss);
                let photometric = tape.value(photo);
                let smooth_v = tape.value(smooth);

                // continued cache + sampler fitting on the same secondary rays
                let mut cache_grads = Vec::new();
                let mut vmf_grads = Vec::new();
                let mut cache_loss_used = false;
                if b < cfg.fit_rays_per_step {
                    let mut cache_tape = Tape::new();
                    let mut terms = Vec::new();
                    let mut fit_samples: Vec<(Vec3, Vec<FitSample>)> = Vec::new();
                    for sp in &rec_a.surface {
                        let mut point_fits = Vec::new();
                        for r in &sp.samples {
                            let Some(li_ref) = r.li_ref else { continue };
                            if r.scale == 0.0 {
                                continue;
                            }
                            let (rad, _) = cache_ref.query_tape(
                                &mut cache_tape,
                                &scene_ref.environment,
                                sp.point.x,
                                r.dir,
                                0,
                            )?;
                            for c in 0..3 {
                                let resid = cache_tape.add_const(rad[c], -li_ref.get(c));
                                terms.push(cache_tape.square(resid));
                            }
                            point_fits.push(FitSample {
                                dir: r.dir,
                                pdf: r.pdf,
                                target: li_ref.norm(),
                            });
                        }
                        if !point_fits.is_empty() {
                            fit_samples.push((sp.point.x, point_fits));
                        }
                    }
                    if !terms.is_empty() {
                        let n = terms.len() as f64;
                        let sum = cache_tape.sum(&terms);
                        let loss = cache_tape.scale(sum, 1.0 / n);
                        cache_grads = cache_tape.backward_sparse(loss);
                        cache_loss_used = true;
                    }
                    if cfg.use_vmf_sampler {
                        for (x, fits) in &fit_samples {
                            let mut vmf_tape = Tape::new();
                            if let Ok(loss) = vmf_ref.fit_loss_tape(&mut vmf_tape, *x, fits) {
                                vmf_grads.extend(vmf_tape.backward_sparse(loss));
                            }
                        }
                    }
                }

                Ok(RayResult {
                    photometric,
                    smooth: smooth_v,
                    scene_grads,
                    cache_grads,
                    vmf_grads,
                    cache_loss_used,
                })
            })
            .collect();

        let mut scene_grads = vec![0.0; scene_param_len];
        let mut cache_grads = vec![0.0; cache.param_count()];
        let mut vmf_grads = vec![0.0; vmf.raw().len()];
        let mut photometric = 0.0;
        let mut smooth = 0.0;
        let mut cache_rays = 0usize;
        for r in results {
            let r = r?;
            photometric += r.photometric;
            smooth += r.smooth;
            for (id, g) in r.scene_grads {
                scene_grads[id as usize] += g;
            }
            for (id, g) in r.cache_grads {
                cache_grads[id as usize] += g;
            }
            for (id, g) in r.vmf_grads {
                vmf_grads[id as usize] += g;
            }
            if r.cache_loss_used {
                cache_rays += 1;
            }
        }
        photometric /= cfg.batch as f64;
        smooth /= cfg.batch as f64;
        if !photometric.is_finite() {
            return Err(OptimizeError::NonFiniteLoss { step, loss: photometric });
        }
        for g in scene_grads.iter_mut() {
            *g /= cfg.batch as f64;
        }
        if cache_rays > 0 {
            for g in cache_grads.iter_mut() {
                *g /= cache_rays as f64;
            }
            for g in vmf_grads.iter_mut() {
                *g /= cache_rays as f64;
            }
        }

        // apply updates: materials and env at their own rates; the material
        // rate decays linearly over the second half of the run
        let half = cfg.stage2_steps / 2;
        let lr_mat = if step < half {
            cfg.lr_materials
        } else {
            let t = (step - half) as f64 / (cfg.stage2_steps - half).max(1) as f64;
            cfg.lr_materials * (1.0 - 0.6 * t)
        };
        adam_materials.step(scene.materials.raw_mut(), &scene_grads[..mat_len], lr_mat);
        if cfg.optimize_env {
            adam_env.step(&mut scene.environment.data, &scene_grads[mat_len..], cfg.lr_env);
            for v in scene.environment.data.iter_mut() {
                *v = v.max(0.0);
            }
        }
        if cache_rays > 0 {
            adam_cache.step(&mut cache.params, &cache_grads, cfg.lr_cache);
            if cfg.use_vmf_sampler {
                adam_vmf.step(vmf.raw_mut(), &vmf_grads, cfg.lr_vmf);
            }
        }

        let (em, er, ea) = match truth {
            Some(t) => material_error(&scene, &scene.materials, t, 99),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        trace.push(InvertStepTrace {
            step,
            photometric,
            normal: 0.0,
            smooth,
            density: 0.0,
            param_err_m: em,
            param_err_r: er,
            param_err_a: ea,
        });
    }

    Ok(InvertOutcome { scene, cache, vmf, trace })
}

/// Pseudo-albedo oracle: fast-cache outgoing color toward +z over a
/// 32-sample cosine-weighted irradiance estimate, floored at 1e-3.
pub fn irradiance_pseudo_albedo(scene: &Scene, cache: &FastCache, x: Vec3) -> Rgb {
    let frame = match scene.density.derived_normal(x) {
        Some(n) => crate::math::ShadingFrame::from_normal(n),
        None => return Rgb::ZERO,
    };
    let mut key = 0xA1B2u64;
    for v in [x.x, x.y, x.z] {
        key = key.rotate_left(17) ^ v.to_bits();
    }
    let mut rng = RngStream::new(key).purpose(Purpose::Misc);
    let mut irradiance = Rgb::ZERO;
    let n = 32;
    for _ in 0..n {
        let s = crate::brdf::sample_cosine(&frame, rng.next_f64(), rng.next_f64());
        // f cancels: cosine-weighted samples of L_i give E = irradiance / pi
        irradiance += cache.query(&scene.environment, x, s.dir).radiance;
    }
    irradiance = irradiance * (std::f64::consts::PI / n as f64);
    let color = cache.query(&scene.environment, x, frame.normal).radiance;
    Rgb::new(
        color.x / irradiance.x.max(1e-3),
        color.y / irradiance.y.max(1e-3),
        color.z / irradiance.z.max(1e-3),
    )
}
