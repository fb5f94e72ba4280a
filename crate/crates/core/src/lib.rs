//! Volumetric Monte Carlo rendering and inverse rendering toolkit.
//!
//! The crate renders analytic volumetric scenes with unbiased estimators of
//! the rendering equation, reduces their variance with an occlusion-aware
//! vMF importance sampler and a trainable fast radiance cache used as a
//! control variate, and recovers material parameters by gradient descent
//! through a small reverse-mode tape.

pub mod autodiff;
pub mod cache;
pub mod estimator;
pub mod io;
pub mod presets;
pub mod render;
pub mod brdf;
pub mod math;
pub mod optimize;
pub mod rng;
pub mod scene;
pub mod selftest;
pub mod stats;
pub mod vmf;
pub mod volume;

pub use math::{Rgb, ShadingFrame, Vec3};
pub use rng::{Purpose, RngStream};
