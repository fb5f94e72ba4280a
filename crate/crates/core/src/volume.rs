//! Volume-rendering quadrature and the single-sample surface-point
//! estimator that replaces the per-sample shading sum with a categorical
//! draw over the render weights.

use crate::math::{Rgb, Vec3};
use crate::rng::RngStream;
use crate::scene::{DensityField, Ray};

/// Strictly increasing sample distances within [0, t_far).
#[derive(Clone, Debug)]
pub struct RayPartition {
    pub distances: Vec<f64>,
}

impl RayPartition {
    pub fn new(distances: Vec<f64>) -> Self {
        debug_assert!(!distances.is_empty());
        debug_assert!(distances.windows(2).all(|w| w[0] < w[1]));
        RayPartition { distances }
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }
}

/// Equal segments over [0, t_far]; distances are the segment left edges.
pub fn uniform_partition(ray: &Ray, n: usize) -> RayPartition {
    assert!(n >= 1);
    let step = ray.t_far / n as f64;
    RayPartition::new((0..n).map(|k| k as f64 * step).collect())
}

/// One jittered point per equal stratum.
pub fn stratified_partition(ray: &Ray, n: usize, rng: &mut RngStream) -> RayPartition {
    assert!(n >= 1);
    let step = ray.t_far / n as f64;
    RayPartition::new((0..n).map(|k| (k as f64 + rng.next_f64()) * step).collect())
}

/// Per-sample quadrature weights, the transparency residual, and the sample
/// positions they were computed at.
#[derive(Clone, Debug)]
pub struct RenderWeights {
    pub weights: Vec<f64>,
    /// 1 - sum(weights): transmittance left at the far end of the ray.
    pub tau: f64,
    pub positions: Vec<Vec3>,
}

impl RenderWeights {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// w_k = (1 - e^{-sigma(x_k) d_k}) exp(-sum_{j<k} sigma(x_j) d_j) with the
/// last segment running to t_far. Deterministic.
pub fn quadrature_weights(field: &DensityField, ray: &Ray, partition: &RayPartition) -> RenderWeights {
    let n = partition.len();
    let mut weights = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    let mut transmittance = 1.0;
    for k in 0..n {
        let t = partition.distances[k];
        let next = if k + 1 < n { partition.distances[k + 1] } else { ray.t_far };
        let delta = (next - t).max(0.0);
        let x = ray.at(t);
        let sigma = field.value(x);
        let alpha = 1.0 - (-sigma * delta).exp();
        weights.push(transmittance * alpha);
        positions.push(x);
        transmittance *= 1.0 - alpha;
    }
    RenderWeights { weights, tau: transmittance, positions }
}

/// Transmittance between two points by midpoint quadrature of the density
/// line integral.
pub fn transmittance(field: &DensityField, from: Vec3, to: Vec3, n: usize) -> f64 {
    let seg = to - from;
    let len = seg.norm();
    if len < 1e-12 {
        return 1.0;
    }
    let dir = seg / len;
    let step = len / n as f64;
    let mut optical = 0.0;
    for i in 0..n {
        let t = (i as f64 + 0.5) * step;
        optical += field.value(from + dir * t) * step;
    }
    (-optical).exp()
}

/// Deterministic midpoint partition, used by the reference cache so repeated
/// queries at the same arguments agree bit-for-bit.
pub fn midpoint_partition(ray: &Ray, n: usize) -> RayPartition {
    assert!(n >= 1);
    let step = ray.t_far / n as f64;
    RayPartition::new((0..n).map(|k| (k as f64 + 0.5) * step).collect())
}

/// sum_k w_k c_k + tau * env.
pub fn composite(weights: &RenderWeights, colors: &[Rgb], env: Rgb) -> Rgb {
    assert_eq!(weights.weights.len(), colors.len(), "one color per weight");
    let mut acc = env * weights.tau;
    for (w, c) in weights.weights.iter().zip(colors) {
        acc += *c * *w;
    }
    acc
}

/// One categorical draw: selected sample index and the multiplier W/K that
/// makes the sum over draws an unbiased estimate of the quadrature sum.
#[derive(Copy, Clone, Debug)]
pub struct SurfaceSample {
    pub index: usize,
    pub multiplier: f64,
}

/// Threshold below which a ray is treated as pure background.
pub const MIN_WEIGHT_MASS: f64 = 1e-9;

/// Draws K i.i.d. indices from Cat(w/W) and attaches multiplier W/K so that
/// E[sum multiplier * c_j] equals the quadrature sum exactly; the env term
/// stays with tau outside. An empty result signals a transparent ray.
pub fn sample_surface_points(
    weights: &RenderWeights,
    k: usize,
    rng: &mut RngStream,
) -> Vec<SurfaceSample> {
    assert!(k >= 1);
    let total = weights.total();
    if total < MIN_WEIGHT_MASS {
        return Vec::new();
    }
    // CDF over unnormalized weights
    let mut cdf = Vec::with_capacity(weights.weights.len());
    let mut acc = 0.0;
    for &w in &weights.weights {
        acc += w;
        cdf.push(acc);
    }
    let multiplier = total / k as f64;
    (0..k)
        .map(|_| {
            let u = rng.next_f64() * total;
            let index = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            SurfaceSample { index, multiplier }
        })
        .collect()
}
