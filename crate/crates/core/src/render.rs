//! Image rendering: per-pixel estimates averaged over spp, parallel over
//! pixels with counter-seeded streams so output is bit-identical for any
//! thread count.

use crate::estimator::{estimate_pixel, EstimatorConfig, FastCacheView, IncomingRadiance, PixelCtx, ReferenceCacheView};
use crate::math::Rgb;
use crate::rng::{Purpose, RngStream};
use crate::scene::{Camera, Scene};
use crate::vmf::VmfParamField;
use rayon::prelude::*;

#[derive(Clone, Debug)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first.
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn rmse(&self, other: &Image) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len());
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (*a - *b).norm_squared())
            .sum();
        (sum / (self.pixels.len() * 3) as f64).sqrt()
    }
}

/// Renders with the given pixel context; pixel (px, py) at sample s draws
/// from seed -> pixel index -> sample index streams.
pub fn render<R: IncomingRadiance, F: IncomingRadiance>(
    ctx: &PixelCtx<R, F>,
    camera: &Camera,
    spp: usize,
    seed: u64,
) -> Image {
    let root = RngStream::new(seed);
    let width = camera.width;
    let height = camera.height;
    let pixels: Vec<Rgb> = (0..width * height)
        .into_par_iter()
        .map(|idx| {
            let px = idx % width;
            let py = idx / width;
            let ray = camera.ray(px, py, ctx.scene.t_far);
            let pixel_rng = root.substream(idx as u64);
            let mut acc = Rgb::ZERO;
            for s in 0..spp {
                let rng = pixel_rng.substream(s as u64).purpose(Purpose::Trial);
                let (est, _) = estimate_pixel(ctx, &ray, &rng)
                    .expect("sampler produced a non-positive pdf");
                acc += est.value;
            }
            acc / spp as f64
        })
        .collect();
    Image { width, height, pixels }
}

/// Convenience: render with the reference cache only (no control variate).
pub fn render_reference(
    scene: &Scene,
    camera: &Camera,
    cfg: EstimatorConfig,
    vmf: Option<&VmfParamField>,
    spp: usize,
    seed: u64,
) -> Image {
    let reference = ReferenceCacheView { scene, cfg: Default::default() };
    let ctx: PixelCtx<_, FastCacheView> = PixelCtx {
        scene,
        reference: &reference,
        fast: None,
        vmf,
        cfg: EstimatorConfig { use_cv: false, ..cfg },
    };
    render(&ctx, camera, spp, seed)
}
