//! Spatially-varying mixtures of von Mises-Fisher lobes used for
//! occlusion-aware importance sampling of incoming radiance.
//!
//! Lobe means are stored as 3D points and projected onto the unit sphere
//! around the query position, so one lobe can track one light source in
//! space. Raw parameters live in an unconstrained space (softplus decode for
//! kappa and lambda) so gradient steps stay valid, and a trilinear grid of
//! raw parameters provides the spatial variation.

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::math::{ShadingFrame, Vec3};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KAPPA_MAX: f64 = 1e4;
pub const LAMBDA_FLOOR: f64 = 1e-6;
/// Raw-space floors applied after fitting updates: softplus gradients die
/// exponentially below these, which would make switched-off lobes
/// unrevivable. The floors keep "off" expressible (orders of magnitude
/// below an active lobe) while keeping the gradient path open.
pub const LAMBDA_RAW_MIN: f64 = -4.0;
pub const KAPPA_RAW_MIN: f64 = -2.0;
/// Below this concentration the lobe is numerically uniform.
pub const KAPPA_UNIFORM: f64 = 1e-6;
/// Lobe points closer than this to the query get the degenerate-projection
/// fallback (+z mean, kappa 0).
pub const PROJECTION_EPS: f64 = 1e-6;

pub const INV_4PI: f64 = 1.0 / (4.0 * std::f64::consts::PI);

#[derive(Debug, Error)]
pub enum VmfError {
    #[error("fit sample {index} has non-positive pdf {pdf}")]
    NonPositivePdf { index: usize, pdf: f64 },
    #[error("fit step needs at least one sample")]
    NoSamples,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus, used to build raw parameters from target values.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn decode_kappa(raw: f64) -> f64 {
    softplus(raw).min(KAPPA_MAX)
}

pub fn decode_lambda(raw: f64) -> f64 {
    softplus(raw) + LAMBDA_FLOOR
}

/// Numerically stable vMF density kappa / (2 pi (1 - e^{-2 kappa})) *
/// e^{kappa (mu.omega - 1)}; the uniform limit is handled explicitly.
pub fn vmf_pdf(mu: Vec3, kappa: f64, omega: Vec3) -> f64 {
    if kappa < KAPPA_UNIFORM {
        return INV_4PI;
    }
    let norm = kappa / (2.0 * std::f64::consts::PI * -(-2.0 * kappa).exp_m1());
    norm * (kappa * (mu.dot(omega) - 1.0)).exp()
}

/// Inverse-CDF sampling in the mu frame: cos theta = 1 + ln(u1 + (1-u1)
/// e^{-2 kappa}) / kappa with uniform azimuth.
pub fn sample_vmf(mu: Vec3, kappa: f64, u1: f64, u2: f64) -> Vec3 {
    let phi = 2.0 * std::f64::consts::PI * u2;
    if kappa < KAPPA_UNIFORM {
        let z = 1.0 - 2.0 * u1;
        let s = (1.0 - z * z).max(0.0).sqrt();
        return Vec3::new(s * phi.cos(), s * phi.sin(), z);
    }
    let mix = (u1 + (1.0 - u1) * (-2.0 * kappa).exp()).max(f64::MIN_POSITIVE);
    let cos_theta = (1.0 + mix.ln() / kappa).clamp(-1.0, 1.0);
    let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
    let local = Vec3::new(sin_theta * phi.cos(), sin_theta * phi.sin(), cos_theta);
    ShadingFrame::from_normal(mu).to_world(local)
}

/// One lobe decoded at a query point.
#[derive(Copy, Clone, Debug)]
pub struct DecodedLobe {
    pub mu: Vec3,
    pub kappa: f64,
    pub lambda: f64,
}

/// A full mixture decoded at a query point; pdf integrates to one over the
/// sphere (lambda floor keeps the partition function positive).
#[derive(Clone, Debug)]
pub struct VmfMixture {
    pub lobes: Vec<DecodedLobe>,
    pub partition: f64,
}

impl VmfMixture {
    pub fn new(lobes: Vec<DecodedLobe>) -> Self {
        let partition = lobes.iter().map(|l| l.lambda).sum();
        VmfMixture { lobes, partition }
    }

    pub fn pdf(&self, omega: Vec3) -> f64 {
        let mut acc = 0.0;
        for l in &self.lobes {
            acc += l.lambda * vmf_pdf(l.mu, l.kappa, omega);
        }
        acc / self.partition
    }

    /// Draws a direction (lobe chosen proportional to lambda) and returns it
    /// with the full mixture pdf at that direction.
    pub fn sample(&self, rng: &mut RngStream) -> (Vec3, f64) {
        let mut pick = rng.next_f64() * self.partition;
        let mut chosen = self.lobes.len() - 1;
        for (i, l) in self.lobes.iter().enumerate() {
            if pick < l.lambda {
                chosen = i;
                break;
            }
            pick -= l.lambda;
        }
        let l = &self.lobes[chosen];
        let dir = sample_vmf(l.mu, l.kappa, rng.next_f64(), rng.next_f64());
        (dir, self.pdf(dir))
    }
}

/// Raw lobe parameters decoded lazily per query point. The grid variant
/// interpolates raw parameters trilinearly before decoding.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum VmfParamField {
    Global {
        lobes: usize,
        /// lobes * 5 raw scalars: mu'_xyz, kappa_raw, lambda_raw per lobe.
        raw: Vec<f64>,
    },
    Grid {
        lobes: usize,
        resolution: [usize; 3],
        min: Vec3,
        max: Vec3,
        /// nodes * lobes * 5 raw scalars, node-major.
        raw: Vec<f64>,
    },
}

/// One importance sample for the fitting loss: direction, the pdf it was
/// drawn with, and the scalar radiance target.
#[derive(Copy, Clone, Debug)]
pub struct FitSample {
    pub dir: Vec3,
    pub pdf: f64,
    pub target: f64,
}

impl VmfParamField {
    pub fn lobe_count(&self) -> usize {
        match self {
            VmfParamField::Global { lobes, .. } | VmfParamField::Grid { lobes, .. } => *lobes,
        }
    }

    pub fn raw(&self) -> &[f64] {
        match self {
            VmfParamField::Global { raw, .. } | VmfParamField::Grid { raw, .. } => raw,
        }
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        match self {
            VmfParamField::Global { raw, .. } | VmfParamField::Grid { raw, .. } => raw,
        }
    }

    /// Clamps raw shape channels into the revivable range.
    pub fn clamp_raw(&mut self) {
        for (i, v) in self.raw_mut().iter_mut().enumerate() {
            match i % 5 {
                3 => *v = v.max(KAPPA_RAW_MIN),
                4 => *v = v.max(LAMBDA_RAW_MIN),
                _ => {}
            }
        }
    }

    /// Fresh field with lobe points scattered in the given bounds, moderate
    /// concentration and equal weights.
    pub fn init(lobes: usize, grid_resolution: Option<[usize; 3]>, bounds: (Vec3, Vec3), rng: &mut RngStream) -> Self {
        Self::init_with(lobes, grid_resolution, bounds, 2.0, 1.0, rng)
    }

    /// Fresh field with chosen initial concentration and weight.
    pub fn init_with(
        lobes: usize,
        grid_resolution: Option<[usize; 3]>,
        bounds: (Vec3, Vec3),
        kappa0: f64,
        lambda0: f64,
        rng: &mut RngStream,
    ) -> Self {
        let kappa_raw = softplus_inv(kappa0);
        let lambda_raw = softplus_inv(lambda0);
        let lobe_block = |rng: &mut RngStream, out: &mut Vec<f64>| {
            for _ in 0..lobes {
                out.push(rng.uniform(bounds.0.x, bounds.1.x));
                out.push(rng.uniform(bounds.0.y, bounds.1.y));
                out.push(rng.uniform(bounds.0.z, bounds.1.z));
                out.push(kappa_raw);
                out.push(lambda_raw);
            }
        };
        match grid_resolution {
            None => {
                let mut raw = Vec::with_capacity(lobes * 5);
                lobe_block(rng, &mut raw);
                VmfParamField::Global { lobes, raw }
            }
            Some(resolution) => {
                let nodes = resolution[0] * resolution[1] * resolution[2];
                // all nodes share one initial lobe layout so the field starts smooth
                let mut block = Vec::with_capacity(lobes * 5);
                lobe_block(rng, &mut block);
                let mut raw = Vec::with_capacity(nodes * lobes * 5);
                for _ in 0..nodes {
                    raw.extend_from_slice(&block);
                }
                VmfParamField::Grid { lobes, resolution, min: bounds.0, max: bounds.1, raw }
            }
        }
    }

    /// Interpolation taps at x: (node index, weight). Global fields have a
    /// single full-weight "node".
    pub fn taps(&self, x: Vec3) -> Vec<(usize, f64)> {
        match self {
            VmfParamField::Global { .. } => vec![(0, 1.0)],
            VmfParamField::Grid { resolution, min, max, .. } => {
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
                            let node = (ix + di) + nx * ((iy + dj) + ny * (iz + dk));
                            taps.push((node, wi * wj * wk));
                        }
                    }
                }
                taps
            }
        }
    }

    fn raw_at(&self, taps: &[(usize, f64)], lobe: usize, channel: usize) -> f64 {
        let raw = self.raw();
        let l = self.lobe_count();
        let mut acc = 0.0;
        for &(node, w) in taps {
            acc += w * raw[node * l * 5 + lobe * 5 + channel];
        }
        acc
    }

    /// Decodes the full mixture at x: raw interpolation, softplus decode,
    /// point-to-sphere projection (degenerate lobes fall back to +z uniform).
    pub fn mixture_at(&self, x: Vec3) -> VmfMixture {
        let taps = self.taps(x);
        let l = self.lobe_count();
        let mut lobes = Vec::with_capacity(l);
        for lobe in 0..l {
            let mu_prime = Vec3::new(
                self.raw_at(&taps, lobe, 0),
                self.raw_at(&taps, lobe, 1),
                self.raw_at(&taps, lobe, 2),
            );
            let kappa = decode_kappa(self.raw_at(&taps, lobe, 3));
            let lambda = decode_lambda(self.raw_at(&taps, lobe, 4));
            let diff = mu_prime - x;
            let (mu, kappa) = match diff.try_normalized(PROJECTION_EPS) {
                Some(mu) => (mu, kappa),
                None => (Vec3::new(0.0, 0.0, 1.0), 0.0),
            };
            lobes.push(DecodedLobe { mu, kappa, lambda });
        }
        VmfMixture::new(lobes)
    }

    pub fn mixture_pdf(&self, x: Vec3, omega: Vec3) -> f64 {
        self.mixture_at(x).pdf(omega)
    }

    pub fn sample(&self, x: Vec3, rng: &mut RngStream) -> (Vec3, f64) {
        self.mixture_at(x).sample(rng)
    }

    /// Builds the importance-sampled fitting loss on the tape:
    /// (1/M) sum_j (Z q(omega_j; x) - target_j)^2 / pdf_j.
    /// Gradients reach the raw parameters of every node touched by the
    /// interpolation at x; pdf and target are constants of the step.
    pub fn fit_loss_tape(
        &self,
        tape: &mut Tape,
        x: Vec3,
        samples: &[FitSample],
    ) -> Result<Var, VmfError> {
        if samples.is_empty() {
            return Err(VmfError::NoSamples);
        }
        for (index, s) in samples.iter().enumerate() {
            if !(s.pdf > 0.0) {
                return Err(VmfError::NonPositivePdf { index, pdf: s.pdf });
            }
        }
        let taps = self.taps(x);
        let l = self.lobe_count();
        let raw_len = self.raw().len();
        let _ = raw_len;

        // raw parameters as leaves, interpolated in raw space
        let raw_node = |tape: &mut Tape, field: &Self, lobe: usize, ch: usize| -> Var {
            let terms: Vec<(Var, f64)> = taps
                .iter()
                .map(|&(node, w)| {
                    let id = node * l * 5 + lobe * 5 + ch;
                    let leaf = tape.param(id, field.raw()[id]);
                    (leaf, w)
                })
                .collect();
            tape.dot_const(&terms)
        };

        struct LobeVars {
            mu: Option<[Var; 3]>,
            kappa: Var,
            lambda: Var,
        }

        let mut lobe_vars = Vec::with_capacity(l);
        for lobe in 0..l {
            let mx = raw_node(tape, self, lobe, 0);
            let my = raw_node(tape, self, lobe, 1);
            let mz = raw_node(tape, self, lobe, 2);
            let kraw = raw_node(tape, self, lobe, 3);
            let lraw = raw_node(tape, self, lobe, 4);

            let sp = tape.softplus(kraw);
            let cap = tape.constant(KAPPA_MAX);
            let kappa = tape.min(sp, cap);
            // keep the normalizer finite in the uniform limit
            let floor = tape.constant(KAPPA_UNIFORM);
            let kappa = tape.max(kappa, floor);

            let lsp = tape.softplus(lraw);
            let lambda = tape.add_const(lsp, LAMBDA_FLOOR);

            let dx = tape.add_const(mx, -x.x);
            let dy = tape.add_const(my, -x.y);
            let dz = tape.add_const(mz, -x.z);
            let diff = [dx, dy, dz];
            let n2 = tape.dot3(diff, diff);
            let mu = if tape.value(n2).sqrt() < PROJECTION_EPS {
                None // degenerate projection: uniform lobe, no direction gradient
            } else {
                Some(tape.normalize3(diff)?)
            };
            lobe_vars.push(LobeVars { mu, kappa, lambda });
        }

        // Z q(omega) = sum_l lambda_l vmf(omega; mu_l, kappa_l)
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut per_sample = Vec::with_capacity(samples.len());
        for s in samples {
            let mut terms = Vec::with_capacity(l);
            for lv in &lobe_vars {
                let density = match lv.mu {
                    None => tape.constant(INV_4PI),
                    Some(mu) => {
                        let minus2k = tape.scale(lv.kappa, -2.0);
                        let e = tape.exp(minus2k);
                        let one = tape.constant(1.0);
                        let om = tape.sub(one, e);
                        let denom = tape.scale(om, two_pi);
                        let norm = tape.div(lv.kappa, denom)?;
                        let omega = [
                            tape.constant(s.dir.x),
                            tape.constant(s.dir.y),
                            tape.constant(s.dir.z),
                        ];
                        let cos = tape.dot3(mu, omega);
                        let cm1 = tape.add_const(cos, -1.0);
                        let expo = tape.mul(lv.kappa, cm1);
                        let kernel = tape.exp(expo);
                        tape.mul(norm, kernel)
                    }
                };
                let term = tape.mul(lv.lambda, density);
                terms.push(term);
            }
            let zq = tape.sum(&terms);
            let resid = tape.add_const(zq, -s.target);
            let sq = tape.square(resid);
            per_sample.push(tape.scale(sq, 1.0 / s.pdf));
        }
        let total = tape.sum(&per_sample);
        Ok(tape.scale(total, 1.0 / samples.len() as f64))
    }

    /// Plain (tape-free) value of the fitting loss, mainly for traces.
    pub fn fit_loss(&self, x: Vec3, samples: &[FitSample]) -> Result<f64, VmfError> {
        if samples.is_empty() {
            return Err(VmfError::NoSamples);
        }
        let mix = self.mixture_at(x);
        let mut acc = 0.0;
        for (index, s) in samples.iter().enumerate() {
            if !(s.pdf > 0.0) {
                return Err(VmfError::NonPositivePdf { index, pdf: s.pdf });
            }
            let zq = mix.pdf(s.dir) * mix.partition;
            acc += (zq - s.target) * (zq - s.target) / s.pdf;
        }
        Ok(acc / samples.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vmf field serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{chi2_test, sphere_bin};

    #[test]
    fn pdf_uniform_limit_and_peak() {
        let mu = Vec3::new(0.0, 0.0, 1.0);
        assert!((vmf_pdf(mu, 0.0, Vec3::new(1.0, 0.0, 0.0)) - INV_4PI).abs() < 1e-12);
        let peak = vmf_pdf(mu, 50.0, mu);
        let expect = 50.0 / (2.0 * std::f64::consts::PI * (1.0 - (-100.0f64).exp()));
        assert!((peak - expect).abs() < 1e-9);
        assert!((peak - 7.95775).abs() < 1e-4);
    }

    #[test]
    fn pdf_integrates_to_one() {
        // stratified-in-z MC so the kappa = 500 spike is resolved
        let mu = Vec3::new(0.3, -0.5, 0.81).normalized();
        let frame = ShadingFrame::from_normal(mu);
        let mut rng = RngStream::new(17);
        for kappa in [0.1, 5.0, 500.0] {
            let n = 1_000_000usize;
            let mut acc = 0.0;
            for i in 0..n {
                let z = -1.0 + (i as f64 + rng.next_f64()) * 2.0 / n as f64;
                let phi = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
                let s = (1.0 - z * z).max(0.0).sqrt();
                let d = frame.to_world(Vec3::new(s * phi.cos(), s * phi.sin(), z));
                acc += vmf_pdf(mu, kappa, d);
            }
            let integral = acc / n as f64 * 4.0 * std::f64::consts::PI;
            assert!((integral - 1.0).abs() < 0.005, "kappa {kappa}: {integral}");
        }
    }

    #[test]
    fn sampler_uniform_at_zero_kappa() {
        let mu = Vec3::new(0.0, 0.0, 1.0);
        let mut rng = RngStream::new(4);
        let n = 1_000_000;
        let mut mean = Vec3::ZERO;
        for _ in 0..n {
            mean += sample_vmf(mu, 0.0, rng.next_f64(), rng.next_f64());
        }
        assert!((mean / n as f64).norm() < 0.01);
    }

    #[test]
    fn sampler_concentrates_at_large_kappa() {
        let mu = Vec3::new(0.6, 0.48, 0.64).normalized();
        let mut rng = RngStream::new(8);
        for _ in 0..1000 {
            let d = sample_vmf(mu, 1e4, rng.next_f64(), rng.next_f64());
            assert!(mu.dot(d).acos() < 0.05, "sample strayed {} rad", mu.dot(d).acos());
        }
    }

    #[test]
    fn sampler_chi_square_against_pdf() {
        // bins in the lobe frame: the exact CDF in cos(theta) gives exact
        // expected counts, so the test probes only the sampler
        let mu = Vec3::new(0.0, 0.6, 0.8).normalized();
        let frame = ShadingFrame::from_normal(mu);
        let kappa = 10.0;
        let (n_z, n_phi) = (32, 16); // 512 bins
        let n = 1_000_000usize;
        let mut rng = RngStream::new(12);
        let mut observed = vec![0.0; n_z * n_phi];
        for _ in 0..n {
            let d = sample_vmf(mu, kappa, rng.next_f64(), rng.next_f64());
            let local = frame.to_local(d);
            let zi = (((local.z + 1.0) / 2.0 * n_z as f64) as usize).min(n_z - 1);
            let phi = local.y.atan2(local.x) + std::f64::consts::PI;
            let pi_ = ((phi / (2.0 * std::f64::consts::PI) * n_phi as f64) as usize).min(n_phi - 1);
            observed[zi * n_phi + pi_] += 1.0;
        }
        // F(z) = (e^{kappa (z-1)} - e^{-2 kappa}) / (1 - e^{-2 kappa})
        let cdf = |z: f64| {
            ((kappa * (z - 1.0)).exp() - (-2.0 * kappa).exp()) / (1.0 - (-2.0 * kappa).exp())
        };
        let mut expected = vec![0.0; n_z * n_phi];
        for zi in 0..n_z {
            let lo = -1.0 + zi as f64 * 2.0 / n_z as f64;
            let hi = -1.0 + (zi + 1) as f64 * 2.0 / n_z as f64;
            let band = (cdf(hi) - cdf(lo)).max(0.0);
            for pi_ in 0..n_phi {
                expected[zi * n_phi + pi_] = band / n_phi as f64 * n as f64;
            }
        }
        let p = chi2_test(&observed, &expected);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    fn global_field(raw: Vec<f64>) -> VmfParamField {
        let lobes = raw.len() / 5;
        VmfParamField::Global { lobes, raw }
    }

    #[test]
    fn mixture_single_lobe_matches_vmf() {
        let field = global_field(vec![0.0, 0.0, 2.0, softplus_inv(7.0), softplus_inv(1.0)]);
        let x = Vec3::new(0.0, 0.0, 0.5);
        let mu = Vec3::new(0.0, 0.0, 1.0);
        let mut rng = RngStream::new(2);
        for _ in 0..100 {
            let d = sample_vmf(mu, 1.0, rng.next_f64(), rng.next_f64());
            let got = field.mixture_pdf(x, d);
            let want = vmf_pdf(mu, 7.0, d);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_of_identical_lobes_collapses() {
        let one = global_field(vec![0.3, 0.4, 1.5, softplus_inv(3.0), softplus_inv(1.0)]);
        let two = global_field(vec![
            0.3, 0.4, 1.5, softplus_inv(3.0), softplus_inv(1.0),
            0.3, 0.4, 1.5, softplus_inv(3.0), softplus_inv(3.0),
        ]);
        let x = Vec3::new(0.1, -0.2, 0.0);
        let mut rng = RngStream::new(3);
        for _ in 0..100 {
            let z = rng.uniform(-1.0, 1.0);
            let phi = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
            let s = (1.0 - z * z).max(0.0).sqrt();
            let d = Vec3::new(s * phi.cos(), s * phi.sin(), z);
            assert!((one.mixture_pdf(x, d) - two.mixture_pdf(x, d)).abs() < 1e-9);
        }
    }

    #[test]
    fn mixture_pdf_normalizes_and_is_positive() {
        let mut rng = RngStream::new(31);
        let mut raw = Vec::new();
        for _ in 0..8 {
            raw.push(rng.uniform(-1.0, 1.0));
            raw.push(rng.uniform(-1.0, 1.0));
            raw.push(rng.uniform(-1.0, 1.0));
            raw.push(rng.uniform(-2.0, 3.0));
            raw.push(rng.uniform(-2.0, 1.0));
        }
        let field = global_field(raw);
        let x = Vec3::new(0.05, 0.02, -0.1);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = rng.uniform(-1.0, 1.0);
            let phi = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
            let s = (1.0 - z * z).max(0.0).sqrt();
            let d = Vec3::new(s * phi.cos(), s * phi.sin(), z);
            let pdf = field.mixture_pdf(x, d);
            assert!(pdf > 0.0);
            acc += pdf;
        }
        let integral = acc / n as f64 * 4.0 * std::f64::consts::PI;
        assert!((integral - 1.0).abs() < 0.005, "integral {integral}");
    }

    #[test]
    fn sample_matches_reported_pdf_and_chi_square() {
        let field = global_field(vec![
            0.8, 0.0, 0.9, softplus_inv(12.0), softplus_inv(2.0),
            -0.5, 0.4, 0.2, softplus_inv(3.0), softplus_inv(1.0),
        ]);
        let x = Vec3::new(0.0, 0.0, -0.4);
        let mut rng = RngStream::new(23);
        for _ in 0..200 {
            let (d, pdf) = field.sample(x, &mut rng);
            assert!((pdf - field.mixture_pdf(x, d)).abs() < 1e-12);
        }

        let (n_cos, n_phi) = (32, 16);
        let n = 1_000_000usize;
        let mut observed = vec![0.0; n_cos * n_phi];
        for _ in 0..n {
            let (d, _) = field.sample(x, &mut rng);
            observed[sphere_bin(d, n_cos, n_phi)] += 1.0;
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
                        dens += field.mixture_pdf(x, Vec3::new(s * phi.cos(), s * phi.sin(), z));
                    }
                }
                expected[ci * n_phi + pi] = dens / 9.0 * bin_solid * n as f64;
            }
        }
        let p = chi2_test(&observed, &expected);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn fit_loss_zero_at_exact_match() {
        let field = global_field(vec![0.0, 0.0, 2.0, softplus_inv(4.0), softplus_inv(1.0)]);
        let x = Vec3::ZERO;
        let mix = field.mixture_at(x);
        let mut rng = RngStream::new(6);
        let samples: Vec<FitSample> = (0..16)
            .map(|_| {
                let (dir, pdf) = mix.sample(&mut rng);
                FitSample { dir, pdf, target: mix.pdf(dir) * mix.partition }
            })
            .collect();
        let mut tape = Tape::new();
        let loss = field.fit_loss_tape(&mut tape, x, &samples).unwrap();
        assert!(tape.value(loss).abs() < 1e-18);
        let grads = tape.backward(loss);
        assert!(grads.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn fit_loss_rejects_bad_pdf() {
        let field = global_field(vec![0.0, 0.0, 2.0, 0.0, 0.0]);
        let s = FitSample { dir: Vec3::new(0.0, 0.0, 1.0), pdf: 0.0, target: 1.0 };
        let mut tape = Tape::new();
        let err = field.fit_loss_tape(&mut tape, Vec3::ZERO, &[s]).unwrap_err();
        assert!(err.to_string().contains("non-positive pdf"));
    }

    #[test]
    fn fit_gradients_match_finite_differences() {
        let mut rng = RngStream::new(91);
        let mut raw = Vec::new();
        for _ in 0..4 {
            raw.push(rng.uniform(-1.0, 1.0));
            raw.push(rng.uniform(-1.0, 1.0));
            raw.push(rng.uniform(0.5, 1.5));
            raw.push(rng.uniform(-1.0, 2.0));
            raw.push(rng.uniform(-1.0, 1.0));
        }
        let field = global_field(raw.clone());
        let x = Vec3::new(0.1, -0.05, 0.0);
        let samples: Vec<FitSample> = (0..12)
            .map(|_| {
                let z = rng.uniform(-1.0, 1.0);
                let phi = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
                let s = (1.0 - z * z).max(0.0).sqrt();
                FitSample {
                    dir: Vec3::new(s * phi.cos(), s * phi.sin(), z),
                    pdf: INV_4PI,
                    target: rng.uniform(0.0, 2.0),
                }
            })
            .collect();

        let mut tape = Tape::new();
        let loss = field.fit_loss_tape(&mut tape, x, &samples).unwrap();
        let grads = tape.backward(loss);

        let h = 1e-5;
        for i in 0..raw.len() {
            let mut plus = raw.clone();
            plus[i] += h;
            let mut minus = raw.clone();
            minus[i] -= h;
            let fp = global_field(plus).fit_loss(x, &samples).unwrap();
            let fm = global_field(minus).fit_loss(x, &samples).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(grads[i].abs()).max(1e-10);
            assert!(
                (fd - grads[i]).abs() / denom < 1e-4,
                "raw[{i}]: ad {} vs fd {fd}",
                grads[i]
            );
        }
    }

    #[test]
    fn grid_taps_sum_to_one() {
        let mut rng = RngStream::new(14);
        let field = VmfParamField::init(
            2,
            Some([4, 4, 4]),
            (Vec3::splat(-1.0), Vec3::splat(1.0)),
            &mut rng,
        );
        for _ in 0..50 {
            let x = Vec3::new(rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2));
            let taps = field.taps(x);
            let total: f64 = taps.iter().map(|t| t.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
