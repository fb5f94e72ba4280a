//! Disney-style GGX BRDF: Trowbridge-Reitz distribution, Schlick Fresnel
//! with F0 = lerp(0.04, albedo, metalness), separable Smith geometry with
//! the Schlick-GGX approximation (k = alpha/2), and the Disney roughness
//! remap alpha = r^2.
//!
//! Sampling strategies: cosine hemisphere, classical NDF sampling, and the
//! diffuse-lobe one-sample MIS combination with a spatially-varying vMF
//! mixture. Every density used in divisions is mixed with a small uniform
//! hemisphere component (sampling and pdf jointly), which keeps the
//! estimators unbiased while bounding f*L/p.

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::math::{Rgb, ShadingFrame, Vec3};
use crate::rng::RngStream;
use crate::vmf::VmfParamField;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DIELECTRIC_F0: f64 = 0.04;
/// Grazing cutoff for the specular denominator 4 (n.wi)(n.wo).
pub const COS_EPS: f64 = 1e-6;
/// Weight of the defensive uniform-hemisphere component.
pub const EPS_UNIFORM: f64 = 0.01;

const INV_PI: f64 = std::f64::consts::FRAC_1_PI;
const INV_2PI: f64 = 0.5 * std::f64::consts::FRAC_1_PI;

#[derive(Debug, Error)]
pub enum BrdfError {
    #[error("grazing configuration: cos_i = {cos_i}, cos_o = {cos_o}")]
    Grazing { cos_i: f64, cos_o: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Copy, Clone, Debug)]
pub struct MaterialParams {
    pub metalness: f64,
    pub roughness: f64,
    pub albedo: Rgb,
}

impl MaterialParams {
    pub fn new(metalness: f64, roughness: f64, albedo: Rgb) -> Self {
        MaterialParams {
            metalness: metalness.clamp(0.0, 1.0),
            roughness: roughness.clamp(0.0, 1.0),
            albedo: albedo.clamp(0.0, 1.0),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid with clamping away from the open-interval ends.
pub fn logit(y: f64) -> f64 {
    let y = y.clamp(1e-4, 1.0 - 1e-4);
    (y / (1.0 - y)).ln()
}

/// Spatially-varying material parameters stored raw (unconstrained) and
/// mapped into range by a sigmoid after interpolation. Channel order per
/// node: metalness, roughness, albedo rgb.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MaterialField {
    Constant { raw: Vec<f64> },
    Grid { resolution: [usize; 3], min: Vec3, max: Vec3, raw: Vec<f64> },
}

impl MaterialField {
    pub fn constant(metalness: f64, roughness: f64, albedo: Rgb) -> Self {
        MaterialField::Constant {
            raw: vec![logit(metalness), logit(roughness), logit(albedo.x), logit(albedo.y), logit(albedo.z)],
        }
    }

    pub fn grid_filled(resolution: [usize; 3], min: Vec3, max: Vec3, params: MaterialParams) -> Self {
        let nodes = resolution[0] * resolution[1] * resolution[2];
        let block = [
            logit(params.metalness),
            logit(params.roughness),
            logit(params.albedo.x),
            logit(params.albedo.y),
            logit(params.albedo.z),
        ];
        let mut raw = Vec::with_capacity(nodes * 5);
        for _ in 0..nodes {
            raw.extend_from_slice(&block);
        }
        MaterialField::Grid { resolution, min, max, raw }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            MaterialField::Constant { raw } => {
                if raw.len() != 5 {
                    return Err(format!("constant material needs 5 raw values, got {}", raw.len()));
                }
            }
            MaterialField::Grid { resolution, raw, .. } => {
                let nodes = resolution[0] * resolution[1] * resolution[2];
                if resolution.iter().any(|&n| n < 2) {
                    return Err("material grid needs at least 2 nodes per axis".into());
                }
                if raw.len() != nodes * 5 {
                    return Err(format!("material grid needs {} raw values, got {}", nodes * 5, raw.len()));
                }
            }
        }
        if self.raw().iter().any(|v| !v.is_finite()) {
            return Err("material raw values must be finite".into());
        }
        Ok(())
    }

    pub fn raw(&self) -> &[f64] {
        match self {
            MaterialField::Constant { raw } | MaterialField::Grid { raw, .. } => raw,
        }
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        match self {
            MaterialField::Constant { raw } | MaterialField::Grid { raw, .. } => raw,
        }
    }

    /// Interpolation taps at x as (node index, weight).
    pub fn taps(&self, x: Vec3) -> Vec<(usize, f64)> {
        match self {
            MaterialField::Constant { .. } => vec![(0, 1.0)],
            MaterialField::Grid { resolution, min, max, .. } => {
                let [nx, ny, nz] = *resolution;
                let ext = *max - *min;
                let gx = ((x.x - min.x) / ext.x).clamp(0.0, 1.0) * (nx - 1) as f64;
                let gy = ((x.y - min.y) / ext.y).clamp(0.0, 1.0) * (ny - 1) as f64;
                let gz = ((x.z - min.z) / ext.z).clamp(0.0, 1.0) * (nz - 1) as f64;
                let ix = (gx.floor() as usize).min(nx - 2);
                let iy = (gy.floor() as usize).min(ny - 2);
                let iz = (gz.floor() as usize).min(nz - 2);
                let (fx, fy, fz) = (gx - ix as f64, gy - iy as f64, gz - iz as f64);
                let mut taps = Vec::with_capacity(8);
                for (dk, wk) in [(0, 1.0 - fz), (1, fz)] {
                    for (dj, wj) in [(0, 1.0 - fy), (1, fy)] {
                        for (di, wi) in [(0, 1.0 - fx), (1, fx)] {
                            taps.push(((ix + di) + nx * ((iy + dj) + ny * (iz + dk)), wi * wj * wk));
                        }
                    }
                }
                taps
            }
        }
    }

    fn raw_at(&self, taps: &[(usize, f64)], channel: usize) -> f64 {
        let raw = self.raw();
        taps.iter().map(|&(node, w)| w * raw[node * 5 + channel]).sum()
    }

    /// Decoded parameters at x; raw interpolation happens before the sigmoid.
    pub fn params_at(&self, x: Vec3) -> MaterialParams {
        let taps = self.taps(x);
        MaterialParams {
            metalness: sigmoid(self.raw_at(&taps, 0)),
            roughness: sigmoid(self.raw_at(&taps, 1)),
            albedo: Rgb::new(
                sigmoid(self.raw_at(&taps, 2)),
                sigmoid(self.raw_at(&taps, 3)),
                sigmoid(self.raw_at(&taps, 4)),
            ),
        }
    }

    /// Decoded parameters as tape nodes; parameter ids are `base + raw index`.
    pub fn params_on_tape(&self, tape: &mut Tape, x: Vec3, base: usize) -> MaterialVars {
        let taps = self.taps(x);
        let raw = self.raw();
        let channel = |tape: &mut Tape, ch: usize| -> Var {
            let terms: Vec<(Var, f64)> = taps
                .iter()
                .map(|&(node, w)| {
                    let id = node * 5 + ch;
                    (tape.param(base + id, raw[id]), w)
                })
                .collect();
            let interp = tape.dot_const(&terms);
            tape.sigmoid(interp)
        };
        MaterialVars {
            metalness: channel(tape, 0),
            roughness: channel(tape, 1),
            albedo: [channel(tape, 2), channel(tape, 3), channel(tape, 4)],
        }
    }
}

/// Material parameters as differentiable tape nodes.
#[derive(Copy, Clone, Debug)]
pub struct MaterialVars {
    pub metalness: Var,
    pub roughness: Var,
    pub albedo: [Var; 3],
}

/// Trowbridge-Reitz NDF with alpha = roughness^2.
pub fn ndf_value(roughness: f64, cos_nh: f64) -> f64 {
    let alpha = roughness * roughness;
    let a2 = alpha * alpha;
    let d = cos_nh * cos_nh * (a2 - 1.0) + 1.0;
    a2 / (std::f64::consts::PI * d * d)
}

fn smith_g1(cos: f64, k: f64) -> f64 {
    cos / (cos * (1.0 - k) + k)
}

fn schlick(f0: f64, cos_d: f64) -> f64 {
    f0 + (1.0 - f0) * (1.0 - cos_d).powi(5)
}

/// (1 - m) a / pi.
pub fn diffuse_brdf(params: &MaterialParams) -> Rgb {
    params.albedo * ((1.0 - params.metalness) * INV_PI)
}

/// D F G / (4 (n.wi)(n.wo)); errors at grazing configurations.
pub fn specular_brdf(
    params: &MaterialParams,
    frame: &ShadingFrame,
    wi: Vec3,
    wo: Vec3,
) -> Result<Rgb, BrdfError> {
    let cos_i = frame.cos_theta(wi);
    let cos_o = frame.cos_theta(wo);
    if cos_i <= COS_EPS || cos_o <= COS_EPS {
        return Err(BrdfError::Grazing { cos_i, cos_o });
    }
    let h = (wi + wo).try_normalized(1e-12).ok_or(BrdfError::Grazing { cos_i, cos_o })?;
    let cos_nh = frame.cos_theta(h).max(0.0);
    let cos_d = wi.dot(h).max(0.0);
    let alpha = params.roughness * params.roughness;
    let d = ndf_value(params.roughness, cos_nh);
    let k = alpha / 2.0;
    let g = smith_g1(cos_i, k) * smith_g1(cos_o, k);
    let f0 = Rgb::splat(DIELECTRIC_F0).lerp(params.albedo, params.metalness);
    let fresnel = Rgb::new(schlick(f0.x, cos_d), schlick(f0.y, cos_d), schlick(f0.z, cos_d));
    Ok(fresnel * (d * g / (4.0 * cos_i * cos_o)))
}

pub fn eval_brdf(
    params: &MaterialParams,
    frame: &ShadingFrame,
    wi: Vec3,
    wo: Vec3,
) -> Result<Rgb, BrdfError> {
    Ok(diffuse_brdf(params) + specular_brdf(params, frame, wi, wo)?)
}

/// Diffuse lobe on the tape: (1 - m) a / pi.
pub fn diffuse_brdf_tape(tape: &mut Tape, mat: &MaterialVars) -> [Var; 3] {
    let one = tape.constant(1.0);
    let om = tape.sub(one, mat.metalness);
    let w = tape.scale(om, INV_PI);
    [
        tape.mul(w, mat.albedo[0]),
        tape.mul(w, mat.albedo[1]),
        tape.mul(w, mat.albedo[2]),
    ]
}

/// Specular lobe on the tape with directions held constant; only the
/// material parameters are differentiable.
pub fn specular_brdf_tape(
    tape: &mut Tape,
    mat: &MaterialVars,
    frame: &ShadingFrame,
    wi: Vec3,
    wo: Vec3,
) -> Result<[Var; 3], BrdfError> {
    let cos_i = frame.cos_theta(wi);
    let cos_o = frame.cos_theta(wo);
    if cos_i <= COS_EPS || cos_o <= COS_EPS {
        return Err(BrdfError::Grazing { cos_i, cos_o });
    }
    let h = (wi + wo).try_normalized(1e-12).ok_or(BrdfError::Grazing { cos_i, cos_o })?;
    let cos_nh = frame.cos_theta(h).max(0.0);
    let cos_d = wi.dot(h).max(0.0);

    let alpha = tape.mul(mat.roughness, mat.roughness);
    let a2 = tape.mul(alpha, alpha);
    // D = a2 / (pi ((n.h)^2 (a2 - 1) + 1)^2)
    let c2 = cos_nh * cos_nh;
    let dterm = tape.scale(a2, c2);
    let dterm = tape.add_const(dterm, 1.0 - c2);
    let d2 = tape.mul(dterm, dterm);
    let denom = tape.scale(d2, std::f64::consts::PI);
    let d = tape.div(a2, denom)?;

    // G = G1(cos_i) G1(cos_o), k = alpha / 2
    let k = tape.scale(alpha, 0.5);
    let g1 = |tape: &mut Tape, cos: f64| -> Result<Var, BrdfError> {
        // cos / (cos (1 - k) + k) = cos / (cos + k (1 - cos))
        let kc = tape.scale(k, 1.0 - cos);
        let den = tape.add_const(kc, cos);
        let num = tape.constant(cos);
        Ok(tape.div(num, den)?)
    };
    let g_i = g1(tape, cos_i)?;
    let g_o = g1(tape, cos_o)?;
    let g = tape.mul(g_i, g_o);

    let s5 = (1.0 - cos_d).powi(5);
    let scale = 1.0 / (4.0 * cos_i * cos_o);
    let dg = tape.mul(d, g);
    let mut out = [dg; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        // F0 = 0.04 (1 - m) + a m ; F = F0 (1 - s5) + s5
        let am = tape.mul(mat.albedo[c], mat.metalness);
        let one = tape.constant(1.0);
        let im = tape.sub(one, mat.metalness);
        let base = tape.scale(im, DIELECTRIC_F0);
        let f0 = tape.add(base, am);
        let f = tape.scale(f0, 1.0 - s5);
        let f = tape.add_const(f, s5);
        let dgf = tape.mul(dg, f);
        *slot = tape.scale(dgf, scale);
    }
    Ok(out)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Strategy {
    Cosine,
    Vmf,
    Ndf,
    Uniform,
}

#[derive(Copy, Clone, Debug)]
pub struct DirectionSample {
    pub dir: Vec3,
    pub pdf: f64,
    pub strategy: Strategy,
}

/// Cosine-weighted hemisphere sample (polar mapping); pdf = (n.w)/pi.
pub fn sample_cosine(frame: &ShadingFrame, u1: f64, u2: f64) -> DirectionSample {
    let cos_theta = (1.0 - u1).sqrt();
    let sin_theta = u1.sqrt();
    let phi = 2.0 * std::f64::consts::PI * u2;
    let local = Vec3::new(sin_theta * phi.cos(), sin_theta * phi.sin(), cos_theta);
    let dir = frame.to_world(local);
    DirectionSample { dir, pdf: cos_theta * INV_PI, strategy: Strategy::Cosine }
}

fn sample_uniform_hemisphere(frame: &ShadingFrame, u1: f64, u2: f64) -> DirectionSample {
    let cos_theta = u1;
    let sin_theta = (1.0 - u1 * u1).max(0.0).sqrt();
    let phi = 2.0 * std::f64::consts::PI * u2;
    let local = Vec3::new(sin_theta * phi.cos(), sin_theta * phi.sin(), cos_theta);
    DirectionSample { dir: frame.to_world(local), pdf: INV_2PI, strategy: Strategy::Uniform }
}

/// Samples a half-vector from D(h)(n.h) and reflects wo about it. Returns
/// `None` when the reflected direction leaves the upper hemisphere (callers
/// record a zero contribution; resampling would bias the estimator).
pub fn sample_ndf(
    roughness: f64,
    frame: &ShadingFrame,
    wo: Vec3,
    u1: f64,
    u2: f64,
) -> Option<DirectionSample> {
    let alpha = roughness * roughness;
    let tan2 = alpha * alpha * u1 / (1.0 - u1).max(f64::MIN_POSITIVE);
    let cos_h = 1.0 / (1.0 + tan2).sqrt();
    let sin_h = (1.0 - cos_h * cos_h).max(0.0).sqrt();
    let phi = 2.0 * std::f64::consts::PI * u2;
    let h = frame.to_world(Vec3::new(sin_h * phi.cos(), sin_h * phi.sin(), cos_h));
    let oh = wo.dot(h);
    if oh <= 1e-9 {
        return None;
    }
    let wi = h * (2.0 * oh) - wo;
    if frame.cos_theta(wi) <= 0.0 {
        return None;
    }
    let pdf = ndf_value(roughness, cos_h) * cos_h / (4.0 * oh);
    Some(DirectionSample { dir: wi, pdf, strategy: Strategy::Ndf })
}

/// Density of classical NDF sampling at an arbitrary direction.
pub fn ndf_pdf(roughness: f64, frame: &ShadingFrame, wo: Vec3, wi: Vec3) -> f64 {
    if frame.cos_theta(wi) <= 0.0 {
        return 0.0;
    }
    let h = match (wi + wo).try_normalized(1e-12) {
        Some(h) => h,
        None => return 0.0,
    };
    let cos_nh = frame.cos_theta(h);
    let oh = wo.dot(h);
    if cos_nh <= 0.0 || oh <= 1e-9 {
        return 0.0;
    }
    ndf_value(roughness, cos_nh) * cos_nh / (4.0 * oh)
}

/// Importance-sampling configuration shared by the estimators.
#[derive(Copy, Clone, Debug)]
pub struct SamplerSettings {
    /// Weight of the defensive uniform-hemisphere component.
    pub eps_uniform: f64,
    /// When false the diffuse lobe samples cosine only (ablation baseline).
    pub use_vmf: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings { eps_uniform: EPS_UNIFORM, use_vmf: true }
    }
}

impl SamplerSettings {
    pub fn cosine_only() -> Self {
        SamplerSettings { use_vmf: false, ..Default::default() }
    }
}

/// One-sample-MIS density of the diffuse-lobe sampler: the balance-heuristic
/// mixture of the vMF field and cosine sampling, floored by the uniform
/// component. This is exactly the density `sample_diffuse` draws from.
///
/// vMF lobes are full-sphere densities by construction; below-horizon
/// directions keep their full-sphere pdf and contribute zero through the
/// clipped cosine factor.
pub fn combined_pdf(
    vmf: Option<(&VmfParamField, Vec3)>,
    frame: &ShadingFrame,
    omega: Vec3,
    settings: &SamplerSettings,
) -> f64 {
    let cos = frame.cos_theta(omega);
    let p_cos = cos.max(0.0) * INV_PI;
    let p_uni = if cos > 0.0 { INV_2PI } else { 0.0 };
    let eps = settings.eps_uniform;
    let core = match vmf {
        Some((field, x)) if settings.use_vmf => {
            0.5 * field.mixture_pdf(x, omega) + 0.5 * p_cos
        }
        _ => p_cos,
    };
    (1.0 - eps) * core + eps * p_uni
}

/// Draws from the diffuse-lobe mixture; the returned pdf is `combined_pdf`
/// at the drawn direction.
pub fn sample_diffuse(
    vmf: Option<(&VmfParamField, Vec3)>,
    frame: &ShadingFrame,
    settings: &SamplerSettings,
    rng: &mut RngStream,
) -> DirectionSample {
    let eps = settings.eps_uniform;
    let mut sample = if rng.next_f64() < eps {
        sample_uniform_hemisphere(frame, rng.next_f64(), rng.next_f64())
    } else {
        match vmf {
            Some((field, x)) if settings.use_vmf => {
                if rng.next_f64() < 0.5 {
                    let (dir, _) = field.sample(x, rng);
                    DirectionSample { dir, pdf: 0.0, strategy: Strategy::Vmf }
                } else {
                    sample_cosine(frame, rng.next_f64(), rng.next_f64())
                }
            }
            _ => sample_cosine(frame, rng.next_f64(), rng.next_f64()),
        }
    };
    sample.pdf = combined_pdf(vmf, frame, sample.dir, settings);
    sample
}

/// Floored density of the specular sampler: NDF sampling mixed with the
/// uniform component.
pub fn specular_pdf(
    roughness: f64,
    frame: &ShadingFrame,
    wo: Vec3,
    omega: Vec3,
    settings: &SamplerSettings,
) -> f64 {
    let p_uni = if frame.cos_theta(omega) > 0.0 { INV_2PI } else { 0.0 };
    (1.0 - settings.eps_uniform) * ndf_pdf(roughness, frame, wo, omega)
        + settings.eps_uniform * p_uni
}

/// Draws from the floored specular sampler. `None` means the NDF branch
/// reflected below the horizon; the sample contributes zero.
pub fn sample_specular(
    roughness: f64,
    frame: &ShadingFrame,
    wo: Vec3,
    settings: &SamplerSettings,
    rng: &mut RngStream,
) -> Option<DirectionSample> {
    let mut sample = if rng.next_f64() < settings.eps_uniform {
        sample_uniform_hemisphere(frame, rng.next_f64(), rng.next_f64())
    } else {
        sample_ndf(roughness, frame, wo, rng.next_f64(), rng.next_f64())?
    };
    sample.pdf = specular_pdf(roughness, frame, wo, sample.dir, settings);
    Some(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{chi2_test, sphere_bin};
    use crate::vmf::softplus_inv;

    fn up_frame() -> ShadingFrame {
        ShadingFrame::from_normal(Vec3::new(0.0, 0.0, 1.0))
    }

    fn uniform_hemi_dir(rng: &mut RngStream, frame: &ShadingFrame) -> Vec3 {
        let z = rng.next_f64();
        let phi = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
        let s = (1.0 - z * z).max(0.0).sqrt();
        frame.to_world(Vec3::new(s * phi.cos(), s * phi.sin(), z))
    }

    #[test]
    fn diffuse_part_at_normal_incidence() {
        let params = MaterialParams::new(0.0, 1.0, Rgb::splat(0.5));
        let d = diffuse_brdf(&params);
        assert!((d - Rgb::splat(0.5 * INV_PI)).norm() < 1e-12);
        // full eval adds the D(alpha=1) normal-incidence specular term
        let frame = up_frame();
        let n = frame.normal;
        let full = eval_brdf(&params, &frame, n, n).unwrap();
        let spec = full - d;
        // D = 1/pi, G = 1, F = 0.04 at cos_d = 1, denom 4
        let expect = 0.04 * INV_PI / 4.0;
        assert!((spec.x - expect).abs() < 1e-12, "{} vs {expect}", spec.x);
    }

    #[test]
    fn grazing_is_an_error() {
        let params = MaterialParams::new(0.3, 0.4, Rgb::splat(0.5));
        let frame = up_frame();
        let wo = Vec3::new(0.0, 0.0, 1.0);
        let wi = Vec3::new(1.0, 0.0, 1e-9).normalized();
        assert!(matches!(eval_brdf(&params, &frame, wi, wo), Err(BrdfError::Grazing { .. })));
    }

    #[test]
    fn reciprocity() {
        let mut rng = RngStream::new(41);
        let frame = up_frame();
        for _ in 0..10_000 {
            let params = MaterialParams::new(
                rng.next_f64(),
                rng.uniform(0.05, 1.0),
                Rgb::new(rng.next_f64(), rng.next_f64(), rng.next_f64()),
            );
            let wi = uniform_hemi_dir(&mut rng, &frame);
            let wo = uniform_hemi_dir(&mut rng, &frame);
            if frame.cos_theta(wi) <= COS_EPS || frame.cos_theta(wo) <= COS_EPS {
                continue;
            }
            let ab = eval_brdf(&params, &frame, wi, wo).unwrap();
            let ba = eval_brdf(&params, &frame, wo, wi).unwrap();
            let denom = ab.norm().max(1e-12);
            assert!((ab - ba).norm() / denom < 1e-6);
        }
    }

    /// Clean-room scalar recomputation of the A.6 terms, written against the
    /// angles rather than vectors, used as an independent oracle.
    fn oracle_specular(m: f64, r: f64, a: f64, wi: Vec3, wo: Vec3) -> f64 {
        let n = Vec3::new(0.0, 0.0, 1.0);
        let h = (wi + wo).normalized();
        let theta_h = h.dot(n).clamp(-1.0, 1.0).acos();
        let alpha = r.powi(2);
        let d = alpha.powi(2)
            / (std::f64::consts::PI
                * (theta_h.cos().powi(2) * (alpha.powi(2) - 1.0) + 1.0).powi(2));
        let f0 = 0.04 * (1.0 - m) + a * m;
        let cos_d = wi.dot(h);
        let f = f0 + (1.0 - f0) * (1.0 - cos_d).powi(5);
        let k = alpha / 2.0;
        let g1 = |c: f64| c / (c * (1.0 - k) + k);
        let g = g1(n.dot(wi)) * g1(n.dot(wo));
        d * f * g / (4.0 * n.dot(wi) * n.dot(wo))
    }

    #[test]
    fn matches_independent_oracle() {
        let frame = up_frame();
        let params = MaterialParams::new(1.0, 0.3, Rgb::new(0.9, 0.6, 0.3));
        let wo = Vec3::new(0.3, -0.1, 0.9486).normalized();
        let mut rng = RngStream::new(7);
        for _ in 0..500 {
            let wi = uniform_hemi_dir(&mut rng, &frame);
            if frame.cos_theta(wi) <= COS_EPS {
                continue;
            }
            let got = specular_brdf(&params, &frame, wi, wo).unwrap();
            for (c, &a) in [0.9, 0.6, 0.3].iter().enumerate() {
                let want = oracle_specular(1.0, 0.3, a, wi, wo);
                let got_c = got.get(c);
                assert!((got_c - want).abs() < 1e-9, "channel {c}: {got_c} vs {want}");
            }
        }
    }

    #[test]
    fn ndf_special_values_and_normalization() {
        assert!((ndf_value(1.0, 1.0) - INV_PI).abs() < 1e-12);
        for r in [0.3f64, 0.7] {
            let alpha2 = r.powi(4);
            assert!((ndf_value(r, 0.0) - alpha2 * INV_PI).abs() < 1e-12);
        }
        // int D (n.h) dw = 1 via z-stratified MC (resolves the r = 0.1 spike)
        let mut rng = RngStream::new(19);
        for r in [0.1, 0.5, 1.0] {
            let n = 1_000_000usize;
            let mut acc = 0.0;
            for i in 0..n {
                let z = (i as f64 + rng.next_f64()) / n as f64;
                acc += ndf_value(r, z) * z;
            }
            let integral = acc / n as f64 * 2.0 * std::f64::consts::PI;
            assert!((integral - 1.0).abs() < 0.01, "r = {r}: {integral}");
        }
    }

    #[test]
    fn ndf_sampler_mirror_limit_and_consistency() {
        let frame = up_frame();
        let wo = frame.normal;
        let mut rng = RngStream::new(29);
        for _ in 0..200 {
            let s = sample_ndf(1e-4, &frame, wo, rng.next_f64(), rng.next_f64()).unwrap();
            assert!((s.dir - wo).norm() < 1e-3);
        }
        // reported pdf equals the closed form recomputed from the direction
        for _ in 0..2000 {
            if let Some(s) = sample_ndf(0.5, &frame, wo, rng.next_f64(), rng.next_f64()) {
                let re = ndf_pdf(0.5, &frame, wo, s.dir);
                assert!((s.pdf - re).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ndf_half_vector_chi_square() {
        // histogram the sampled half-vectors against D(h) (n.h)
        let r = 0.6;
        let frame = up_frame();
        let (n_cos, n_phi) = (32, 8); // upper hemisphere bins over full-sphere grid
        let mut rng = RngStream::new(37);
        let n = 1_000_000usize;
        let mut observed = vec![0.0; n_cos * n_phi];
        for _ in 0..n {
            let alpha = r * r;
            let u1 = rng.next_f64();
            let tan2 = alpha * alpha * u1 / (1.0 - u1).max(f64::MIN_POSITIVE);
            let cos_h = 1.0 / (1.0 + tan2).sqrt();
            let sin_h = (1.0 - cos_h * cos_h).max(0.0).sqrt();
            let phi = 2.0 * std::f64::consts::PI * rng.next_f64();
            let h = frame.to_world(Vec3::new(sin_h * phi.cos(), sin_h * phi.sin(), cos_h));
            observed[sphere_bin(h, n_cos, n_phi)] += 1.0;
        }
        let mut expected = vec![0.0; n_cos * n_phi];
        let bin_solid = 4.0 * std::f64::consts::PI / (n_cos * n_phi) as f64;
        for ci in 0..n_cos {
            for pi in 0..n_phi {
                let mut dens = 0.0;
                for a in 0..5 {
                    let z = -1.0 + (ci as f64 + (a as f64 + 0.5) / 5.0) * 2.0 / n_cos as f64;
                    if z > 0.0 {
                        dens += ndf_value(r, z) * z;
                    }
                }
                expected[ci * n_phi + pi] = dens / 5.0 * bin_solid * n as f64;
            }
        }
        let p = chi2_test(&observed, &expected);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn cosine_sampler_basics() {
        let frame = up_frame();
        let s = sample_cosine(&frame, 0.5, 0.5);
        let expect_cos = (0.5f64).sqrt();
        assert!((frame.cos_theta(s.dir) - expect_cos).abs() < 1e-12);
        assert!((s.pdf - expect_cos * INV_PI).abs() < 1e-12);

        let mut rng = RngStream::new(53);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let s = sample_cosine(&frame, rng.next_f64(), rng.next_f64());
            let c = frame.cos_theta(s.dir);
            assert!(c > 0.0);
            acc += c;
        }
        let mean = acc / n as f64;
        assert!((mean - 2.0 / 3.0).abs() < 0.002, "mean cos = {mean}");
    }

    #[test]
    fn combined_pdf_uniform_lobe_closed_form() {
        // single kappa=0 lobe: p = (1-eps)(0.5/(4pi) + 0.5 cos/pi) + eps/(2pi)
        let field = VmfParamField::Global {
            lobes: 1,
            raw: vec![0.0, 0.0, 50.0, -40.0, softplus_inv(1.0)],
        };
        let frame = up_frame();
        let settings = SamplerSettings::default();
        let x = Vec3::ZERO;
        let mut rng = RngStream::new(61);
        for _ in 0..200 {
            let omega = uniform_hemi_dir(&mut rng, &frame);
            let cos = frame.cos_theta(omega);
            let expect = 0.99 * (0.5 * crate::vmf::INV_4PI + 0.5 * cos * INV_PI) + 0.01 * INV_2PI;
            let got = combined_pdf(Some((&field, x)), &frame, omega, &settings);
            assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        }
        // at omega = n the cosine term contributes 1/pi
        let at_n = combined_pdf(Some((&field, x)), &frame, frame.normal, &settings);
        let expect = 0.99 * (0.5 * crate::vmf::INV_4PI + 0.5 * INV_PI) + 0.01 * INV_2PI;
        assert!((at_n - expect).abs() < 1e-12);
    }

    #[test]
    fn combined_pdf_hemisphere_mass() {
        // lobe straight above the query point with kappa = 5: hemisphere mass
        // of the raw vMF is 1/(1+e^-kappa); total diffuse-sampler mass is
        // (1-eps)(m/2 + 1/2) + eps.
        let kappa = 5.0;
        let field = VmfParamField::Global {
            lobes: 1,
            raw: vec![0.0, 0.0, 10.0, softplus_inv(kappa), softplus_inv(1.0)],
        };
        let frame = up_frame();
        let settings = SamplerSettings::default();
        let x = Vec3::ZERO;
        let m_hemi = 1.0 / (1.0 + (-kappa).exp());
        let expect = 0.99 * (0.5 * m_hemi + 0.5) + 0.01;

        let mut rng = RngStream::new(67);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let omega = uniform_hemi_dir(&mut rng, &frame);
            acc += combined_pdf(Some((&field, x)), &frame, omega, &settings);
        }
        let mass = acc / n as f64 * 2.0 * std::f64::consts::PI;
        assert!((mass - expect).abs() / expect < 0.005, "{mass} vs {expect}");
    }

    #[test]
    fn diffuse_sampler_chi_square_against_combined_pdf() {
        let field = VmfParamField::Global {
            lobes: 2,
            raw: vec![
                0.4, 0.2, 0.9, softplus_inv(8.0), softplus_inv(2.0),
                -0.6, 0.0, 0.5, softplus_inv(1.5), softplus_inv(1.0),
            ],
        };
        let frame = up_frame();
        let settings = SamplerSettings::default();
        let x = Vec3::new(0.0, 0.0, -0.2);
        let mut rng = RngStream::new(71);
        let (n_cos, n_phi) = (32, 8);
        let n = 1_000_000usize;
        let mut observed = vec![0.0; n_cos * n_phi];
        for _ in 0..n {
            let s = sample_diffuse(Some((&field, x)), &frame, &settings, &mut rng);
            observed[sphere_bin(s.dir, n_cos, n_phi)] += 1.0;
        }
        let mut expected = vec![0.0; n_cos * n_phi];
        let bin_solid = 4.0 * std::f64::consts::PI / (n_cos * n_phi) as f64;
        for ci in 0..n_cos {
            for pi in 0..n_phi {
                let mut dens = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        let z = -1.0 + (ci as f64 + (a as f64 + 0.5) / 3.0) * 2.0 / n_cos as f64;
                        let phi = -std::f64::consts::PI
                            + (pi as f64 + (b as f64 + 0.5) / 3.0) * 2.0 * std::f64::consts::PI
                                / n_phi as f64;
                        let s = (1.0 - z * z).max(0.0).sqrt();
                        let d = Vec3::new(s * phi.cos(), s * phi.sin(), z);
                        dens += combined_pdf(Some((&field, x)), &frame, d, &settings);
                    }
                }
                expected[ci * n_phi + pi] = dens / 9.0 * bin_solid * n as f64;
            }
        }
        let p = chi2_test(&observed, &expected);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn combined_pdf_positive_on_upper_hemisphere() {
        let field = VmfParamField::Global {
            lobes: 1,
            raw: vec![0.0, 0.0, -50.0, softplus_inv(900.0), softplus_inv(1.0)],
        };
        let frame = up_frame();
        let settings = SamplerSettings::default();
        let mut rng = RngStream::new(73);
        for _ in 0..10_000 {
            let omega = uniform_hemi_dir(&mut rng, &frame);
            let p = combined_pdf(Some((&field, Vec3::ZERO)), &frame, omega, &settings);
            assert!(p > 0.0);
        }
    }

    #[test]
    fn material_field_decode_and_tape_agree() {
        let field = MaterialField::grid_filled(
            [3, 3, 3],
            Vec3::splat(-1.0),
            Vec3::splat(1.0),
            MaterialParams::new(0.3, 0.6, Rgb::new(0.7, 0.5, 0.2)),
        );
        let x = Vec3::new(0.21, -0.4, 0.8);
        let plain = field.params_at(x);
        let mut tape = Tape::new();
        let vars = field.params_on_tape(&mut tape, x, 0);
        assert!((tape.value(vars.metalness) - plain.metalness).abs() < 1e-12);
        assert!((tape.value(vars.roughness) - plain.roughness).abs() < 1e-12);
        assert!((tape.value(vars.albedo[1]) - plain.albedo.y).abs() < 1e-12);
    }

    #[test]
    fn brdf_tape_matches_plain_eval() {
        let field = MaterialField::constant(0.4, 0.35, Rgb::new(0.8, 0.6, 0.4));
        let frame = up_frame();
        let x = Vec3::ZERO;
        let params = field.params_at(x);
        let mut rng = RngStream::new(79);
        for _ in 0..200 {
            let wi = uniform_hemi_dir(&mut rng, &frame);
            let wo = uniform_hemi_dir(&mut rng, &frame);
            if frame.cos_theta(wi) <= COS_EPS || frame.cos_theta(wo) <= COS_EPS {
                continue;
            }
            let plain = eval_brdf(&params, &frame, wi, wo).unwrap();
            let mut tape = Tape::new();
            let vars = field.params_on_tape(&mut tape, x, 0);
            let d = diffuse_brdf_tape(&mut tape, &vars);
            let s = specular_brdf_tape(&mut tape, &vars, &frame, wi, wo).unwrap();
            for c in 0..3 {
                let v = tape.value(d[c]) + tape.value(s[c]);
                assert!((v - plain.get(c)).abs() < 1e-10);
            }
        }
    }

    /// Energy check: for m = 0, a = 1 the furnace integral is the diffuse
    /// unit plus the dielectric specular reflectance, which is bounded by
    /// F0-scale energy and shrinks as Smith shadowing grows with roughness.
    /// The acceptance suite additionally holds this to the stated 1.02
    /// bound; see white_furnace in the acceptance criteria for the r-by-r
    /// outcome.
    #[test]
    fn white_furnace_energy() {
        let frame = up_frame();
        let wo = frame.normal;
        let mut rng = RngStream::new(83);
        let mut last = f64::INFINITY;
        for r in [0.2, 0.5, 1.0] {
            let params = MaterialParams::new(0.0, r, Rgb::ONE);
            let n = 1_000_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let wi = uniform_hemi_dir(&mut rng, &frame);
                let c = frame.cos_theta(wi);
                if c <= COS_EPS {
                    continue;
                }
                acc += eval_brdf(&params, &frame, wi, wo).unwrap().x * c;
            }
            let integral = acc / n as f64 * 2.0 * std::f64::consts::PI;
            // never below the exact diffuse energy, never past diffuse + F0 slack
            assert!(integral > 1.0 && integral < 1.0 + DIELECTRIC_F0 + 0.005, "r = {r}: {integral}");
            // specular energy decreases with roughness
            assert!(integral < last + 1e-3, "r = {r}: {integral} vs {last}");
            last = integral;
        }
    }
}
