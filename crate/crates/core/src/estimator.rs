//! Rendering-equation estimators.
//!
//! `estimate_lo_plain` is the direct Monte Carlo estimate of outgoing
//! radiance against one cache; `estimate_lo_cv` adds the fast cache as a
//! control variate (many cheap taps plus a few paired reference-minus-fast
//! taps, drawn from independent streams); `estimate_pixel` wraps either in
//! the volume-rendering pipeline: quadrature weights, a categorical draw of
//! K surface points with multiplier W/K, and the environment composited
//! through the residual transparency.
//!
//! Estimators also record their secondary samples so that the optimizer can
//! rebuild the pixel value on the autodiff tape and reuse the same rays to
//! fit the fast cache and the vMF sampler.

use crate::brdf::{
    diffuse_brdf, sample_diffuse, sample_specular, specular_brdf, MaterialParams, SamplerSettings,
};
use crate::cache::{reference_cache_query, testing, FastCache, ReferenceCacheConfig};
use crate::math::{Rgb, ShadingFrame, Vec3};
use crate::rng::{Purpose, RngStream};
use crate::scene::{Ray, Scene};
use crate::stats::WelfordRgb;
use crate::vmf::VmfParamField;
use crate::volume::{quadrature_weights, sample_surface_points, stratified_partition};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("sample pdf must be positive, got {pdf} (strategy {strategy})")]
    NonPositivePdf { pdf: f64, strategy: &'static str },
}

/// Anything that answers "what radiance arrives at x from direction omega".
pub trait IncomingRadiance: Sync {
    fn incoming(&self, x: Vec3, omega: Vec3) -> Rgb;
}

impl<F: Fn(Vec3, Vec3) -> Rgb + Sync> IncomingRadiance for F {
    fn incoming(&self, x: Vec3, omega: Vec3) -> Rgb {
        self(x, omega)
    }
}

/// The reference cache as an incoming-radiance oracle.
pub struct ReferenceCacheView<'a> {
    pub scene: &'a Scene,
    pub cfg: ReferenceCacheConfig,
}

impl IncomingRadiance for ReferenceCacheView<'_> {
    fn incoming(&self, x: Vec3, omega: Vec3) -> Rgb {
        reference_cache_query(self.scene, x, omega, &self.cfg).radiance
    }
}

/// The fast cache as an incoming-radiance oracle: the trained cache plus
/// the analytic emitter pass-through (the same term the reference includes,
/// so it cancels exactly in the control-variate correction).
pub struct FastCacheView<'a> {
    pub cache: &'a FastCache,
    pub scene: &'a Scene,
    pub n_shadow: usize,
}

impl<'a> FastCacheView<'a> {
    pub fn new(cache: &'a FastCache, scene: &'a Scene) -> Self {
        FastCacheView { cache, scene, n_shadow: ReferenceCacheConfig::default().n_shadow }
    }
}

impl IncomingRadiance for FastCacheView<'_> {
    fn incoming(&self, x: Vec3, omega: Vec3) -> Rgb {
        self.cache.query(&self.scene.environment, x, omega).radiance
            + self.scene.emitter_along_ray(x, omega, self.n_shadow)
    }
}

/// Which BRDF lobes the estimator integrates. `Both` splits the secondary
/// budget ceil(M/2) diffuse / floor(M/2) specular.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default)]
pub enum LobeMask {
    #[default]
    Both,
    DiffuseOnly,
    SpecularOnly,
}

impl LobeMask {
    fn split(&self, m: usize) -> (usize, usize) {
        match self {
            LobeMask::Both => (m.div_ceil(2), m / 2),
            LobeMask::DiffuseOnly => (m, 0),
            LobeMask::SpecularOnly => (0, m),
        }
    }
}

#[derive(Copy, Clone, Debug)]
pub struct SamplerCtx<'a> {
    pub settings: SamplerSettings,
    pub vmf: Option<&'a VmfParamField>,
    pub lobes: LobeMask,
}

impl Default for SamplerCtx<'_> {
    fn default() -> Self {
        SamplerCtx { settings: SamplerSettings::default(), vmf: None, lobes: LobeMask::Both }
    }
}

/// A shading point: position, two-sided frame, outgoing direction, and the
/// decoded material parameters.
#[derive(Copy, Clone, Debug)]
pub struct ShadePoint {
    pub x: Vec3,
    pub frame: ShadingFrame,
    pub wo: Vec3,
    pub params: MaterialParams,
}

/// Estimate value plus the per-sample bookkeeping the gradient trick and
/// the variance statistics need.
#[derive(Clone, Debug, Default)]
pub struct RadianceEstimate {
    pub value: Rgb,
    pub m: usize,
    pub m_prime: usize,
    pub k: usize,
    /// Budgeted reference-cache taps (M per shading point). Samples clipped
    /// to zero contribution still consume budget; their pure cache call is
    /// elided because the result would be multiplied by zero.
    pub ref_queries: usize,
    /// Budgeted fast-cache taps (M' + M per shading point under the CV).
    pub fast_queries: usize,
    pub degenerate_normals: usize,
    /// Identity of the RNG stream the estimate consumed; lets the
    /// photometric loss reject estimates built from shared streams.
    pub stream_tag: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LobeKind {
    Diffuse,
    Specular,
}

/// One secondary sample, kept for tape reconstruction and fit reuse.
/// The incoming radiance is stored in env-affine form
/// `li = base + env_coeff * env(dir)` so environment texels can stay
/// differentiable downstream.
#[derive(Copy, Clone, Debug)]
pub struct SecondaryRecord {
    pub lobe: LobeKind,
    pub dir: Vec3,
    pub pdf: f64,
    pub cos: f64,
    /// Contribution scale: cos / (pdf * M_lobe), zero for clipped samples.
    pub scale: f64,
    /// Incoming radiance actually multiplied into the estimate (for CV
    /// delta samples this is reference - fast).
    pub li: Rgb,
    /// Fast-cache tap at this sample, when a fast cache was in use.
    pub li_fast: Option<Rgb>,
    /// Reference tap at this sample (present for plain and delta samples).
    pub li_ref: Option<Rgb>,
}

/// All samples taken at one selected surface point.
#[derive(Clone, Debug)]
pub struct SurfacePointRecord {
    pub point: ShadePoint,
    pub multiplier: f64,
    pub samples: Vec<SecondaryRecord>,
}

/// Everything estimate_pixel did, for tape rebuilds and fit reuse.
#[derive(Clone, Debug, Default)]
pub struct PixelRecord {
    pub surface: Vec<SurfacePointRecord>,
    pub tau: f64,
    pub primary_dir: Vec3,
}

fn lobe_brdf(
    lobe: LobeKind,
    pt: &ShadePoint,
    dir: Vec3,
) -> Option<Rgb> {
    match lobe {
        LobeKind::Diffuse => Some(diffuse_brdf(&pt.params)),
        LobeKind::Specular => specular_brdf(&pt.params, &pt.frame, dir, pt.wo).ok(),
    }
}

/// Draws the secondary directions for one lobe and returns partial records
/// (li not yet attached).
fn draw_lobe_samples(
    pt: &ShadePoint,
    lobe: LobeKind,
    count: usize,
    sampler: &SamplerCtx,
    rng: &mut RngStream,
) -> Result<Vec<SecondaryRecord>, EstimatorError> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let drawn = match lobe {
            LobeKind::Diffuse => Some(sample_diffuse(
                sampler.vmf.map(|f| (f, pt.x)),
                &pt.frame,
                &sampler.settings,
                rng,
            )),
            LobeKind::Specular => {
                sample_specular(pt.params.roughness, &pt.frame, pt.wo, &sampler.settings, rng)
            }
        };
        let record = match drawn {
            None => SecondaryRecord {
                // NDF reflected below the horizon: zero contribution
                lobe,
                dir: -pt.frame.normal,
                pdf: 1.0,
                cos: 0.0,
                scale: 0.0,
                li: Rgb::ZERO,
                li_fast: None,
                li_ref: None,
            },
            Some(s) => {
                if !(s.pdf > 0.0) {
                    return Err(EstimatorError::NonPositivePdf {
                        pdf: s.pdf,
                        strategy: match lobe {
                            LobeKind::Diffuse => "diffuse",
                            LobeKind::Specular => "specular",
                        },
                    });
                }
                let cos = pt.frame.cos_theta(s.dir);
                let scale = if cos > 0.0 { cos / (s.pdf * count as f64) } else { 0.0 };
                SecondaryRecord {
                    lobe,
                    dir: s.dir,
                    pdf: s.pdf,
                    cos,
                    scale,
                    li: Rgb::ZERO,
                    li_fast: None,
                    li_ref: None,
                }
            }
        };
        out.push(record);
    }
    Ok(out)
}

fn accumulate(pt: &ShadePoint, records: &[SecondaryRecord]) -> Rgb {
    let mut acc = Rgb::ZERO;
    for r in records {
        if r.scale == 0.0 {
            continue;
        }
        if let Some(f) = lobe_brdf(r.lobe, pt, r.dir) {
            acc += f.component_mul(r.li) * r.scale;
        }
    }
    acc
}

/// Plain Monte Carlo estimate of outgoing radiance (one cache), with the
/// per-lobe split and the combined diffuse sampler.
pub fn estimate_lo_plain<C: IncomingRadiance>(
    pt: &ShadePoint,
    cache: &C,
    m: usize,
    sampler: &SamplerCtx,
    rng: &RngStream,
) -> Result<(RadianceEstimate, Vec<SecondaryRecord>), EstimatorError> {
    assert!(m >= 1);
    let (m_d, m_s) = sampler.lobes.split(m);
    let mut main = rng.purpose(Purpose::SecondaryMain);
    let mut records = draw_lobe_samples(pt, LobeKind::Diffuse, m_d, sampler, &mut main)?;
    records.extend(draw_lobe_samples(pt, LobeKind::Specular, m_s, sampler, &mut main)?);
    for r in records.iter_mut() {
        if r.scale != 0.0 {
            let li = cache.incoming(pt.x, r.dir);
            r.li = li;
            r.li_ref = Some(li);
        }
    }
    let value = accumulate(pt, &records);
    Ok((
        RadianceEstimate {
            value,
            m,
            m_prime: 0,
            k: 1,
            ref_queries: m,
            fast_queries: 0,
            degenerate_normals: 0,
            stream_tag: main.tag(),
        },
        records,
    ))
}

/// Control-variate estimate: M' fast-cache taps plus M independent paired
/// (reference - fast) taps, added together. Exactly M reference queries and
/// M + M' fast queries. Unbiased regardless of fast-cache quality because
/// both terms are unbiased estimates under the same sampling density.
pub fn estimate_lo_cv<F: IncomingRadiance, R: IncomingRadiance>(
    pt: &ShadePoint,
    fast: &F,
    reference: &R,
    m_prime: usize,
    m: usize,
    sampler: &SamplerCtx,
    rng: &RngStream,
) -> Result<(RadianceEstimate, Vec<SecondaryRecord>), EstimatorError> {
    assert!(m_prime >= 1 && m >= 1);
    let (mp_d, mp_s) = sampler.lobes.split(m_prime);
    let (m_d, m_s) = sampler.lobes.split(m);

    let mut main = rng.purpose(Purpose::SecondaryMain);
    let mut fast_records = draw_lobe_samples(pt, LobeKind::Diffuse, mp_d, sampler, &mut main)?;
    fast_records.extend(draw_lobe_samples(pt, LobeKind::Specular, mp_s, sampler, &mut main)?);
    for r in fast_records.iter_mut() {
        if r.scale != 0.0 {
            let li = fast.incoming(pt.x, r.dir);
            r.li = li;
            r.li_fast = Some(li);
        }
    }
    let value_fast = accumulate(pt, &fast_records);

    // independent substream for the correction term
    let mut delta = rng.purpose(Purpose::SecondaryDelta);
    let mut delta_records = draw_lobe_samples(pt, LobeKind::Diffuse, m_d, sampler, &mut delta)?;
    delta_records.extend(draw_lobe_samples(pt, LobeKind::Specular, m_s, sampler, &mut delta)?);
    for r in delta_records.iter_mut() {
        if r.scale != 0.0 {
            let li_fast = fast.incoming(pt.x, r.dir);
            let li_ref = reference.incoming(pt.x, r.dir);
            r.li = li_ref - li_fast;
            r.li_fast = Some(li_fast);
            r.li_ref = Some(li_ref);
        }
    }
    let value_delta =
        if testing::drop_cv_delta() { Rgb::ZERO } else { accumulate(pt, &delta_records) };

    let mut records = fast_records;
    records.extend(delta_records);
    Ok((
        RadianceEstimate {
            value: value_fast + value_delta,
            m,
            m_prime,
            k: 1,
            ref_queries: m,
            fast_queries: m_prime + m,
            degenerate_normals: 0,
            stream_tag: main.tag() ^ delta.tag(),
        },
        records,
    ))
}

/// Full per-pixel configuration.
#[derive(Copy, Clone, Debug)]
pub struct EstimatorConfig {
    /// Reference-pair sample count per surface point.
    pub m: usize,
    /// Fast-cache sample count per surface point (control variate only).
    pub m_prime: usize,
    /// Surface points drawn per ray.
    pub k: usize,
    /// Primary quadrature samples.
    pub n_primary: usize,
    pub use_cv: bool,
    pub lobes: LobeMask,
    pub settings: SamplerSettings,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            m: 16,
            m_prime: 64,
            k: 1,
            n_primary: 64,
            use_cv: true,
            lobes: LobeMask::Both,
            settings: SamplerSettings::default(),
        }
    }
}

/// Scene + caches + sampler wiring for pixel estimates.
pub struct PixelCtx<'a, R: IncomingRadiance, F: IncomingRadiance> {
    pub scene: &'a Scene,
    pub reference: &'a R,
    pub fast: Option<&'a F>,
    pub vmf: Option<&'a VmfParamField>,
    pub cfg: EstimatorConfig,
}

/// One full pixel estimate: stratified quadrature, K categorical surface
/// points (multiplier W/K), outgoing-radiance estimation at each, and the
/// environment through the residual transparency.
pub fn estimate_pixel<R: IncomingRadiance, F: IncomingRadiance>(
    ctx: &PixelCtx<R, F>,
    ray: &Ray,
    rng: &RngStream,
) -> Result<(RadianceEstimate, PixelRecord), EstimatorError> {
    let mut partition_rng = rng.purpose(Purpose::Partition);
    let partition = stratified_partition(ray, ctx.cfg.n_primary, &mut partition_rng);
    let weights = quadrature_weights(&ctx.scene.density, ray, &partition);
    let mut select_rng = rng.purpose(Purpose::SurfaceSelect);
    let picks = sample_surface_points(&weights, ctx.cfg.k, &mut select_rng);

    let wo = -ray.dir;
    let mut est = RadianceEstimate {
        k: ctx.cfg.k,
        stream_tag: rng.tag(),
        ..Default::default()
    };
    let mut record = PixelRecord { surface: Vec::new(), tau: weights.tau, primary_dir: ray.dir };

    for (i, pick) in picks.iter().enumerate() {
        let x = weights.positions[pick.index];
        let frame = match ctx.scene.shading_frame(x, wo) {
            Some(f) => f,
            None => {
                est.degenerate_normals += 1;
                continue;
            }
        };
        let pt = ShadePoint { x, frame, wo, params: ctx.scene.materials.params_at(x) };
        let sampler = SamplerCtx { settings: ctx.cfg.settings, vmf: ctx.vmf, lobes: ctx.cfg.lobes };
        let point_rng = rng.substream(0x5A11 + i as u64);
        let (lo, samples) = match ctx.fast {
            Some(fast) if ctx.cfg.use_cv => estimate_lo_cv(
                &pt,
                fast,
                ctx.reference,
                ctx.cfg.m_prime,
                ctx.cfg.m,
                &sampler,
                &point_rng,
            )?,
            _ => estimate_lo_plain(&pt, ctx.reference, ctx.cfg.m, &sampler, &point_rng)?,
        };
        est.value += lo.value * pick.multiplier;
        est.m = lo.m;
        est.m_prime = lo.m_prime;
        est.ref_queries += lo.ref_queries;
        est.fast_queries += lo.fast_queries;
        record.surface.push(SurfacePointRecord {
            point: pt,
            multiplier: pick.multiplier,
            samples,
        });
    }

    est.value += ctx.scene.environment.radiance(ray.dir) * weights.tau;
    Ok((est, record))
}

/// Mean/variance/standard error of a family of independent estimates; the
/// trial closure receives the trial index and must be deterministic in it.
/// Trials run in parallel but are reduced in index order.
pub fn collect_trials(trials: usize, f: impl Fn(usize) -> Rgb + Sync + Send) -> WelfordRgb {
    use rayon::prelude::*;
    let values: Vec<Rgb> = (0..trials).into_par_iter().map(f).collect();
    let mut tally = WelfordRgb::new();
    for v in values {
        tally.push(v);
    }
    tally
}

/// One row of the variance report.
#[derive(Clone, Debug)]
pub struct VarianceRow {
    pub estimator: String,
    pub spp: usize,
    pub mean: Rgb,
    pub var: Rgb,
    pub se: Rgb,
}

impl VarianceRow {
    pub fn from_tally(estimator: &str, spp: usize, tally: &WelfordRgb) -> Self {
        VarianceRow {
            estimator: estimator.to_string(),
            spp,
            mean: tally.mean(),
            var: tally.variance(),
            se: tally.std_error(),
        }
    }

    pub fn csv_header() -> &'static str {
        "estimator,spp,mean_r,mean_g,mean_b,var_r,var_g,var_b,se_r,se_g,se_b"
    }

    pub fn to_csv(&self) -> String {
        let m = self.mean;
        let v = self.var;
        let s = self.se;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.estimator, self.spp, m.x, m.y, m.z, v.x, v.y, v.z, s.x, s.y, s.z
        )
    }
}
