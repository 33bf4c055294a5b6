//! Subjective-data processing and benchmark metrics for generated 3D face
//! videos: MOS aggregation with subject screening, fixation saliency maps,
//! score agreement and saliency metrics, training losses and a k-fold
//! evaluation harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agreement;
pub mod bench;
pub mod loss;
pub mod model;
pub mod mos;
pub mod prompts;
pub mod saliency;
pub mod saliency_metrics;

pub use model::{DatasetManifest, Dimension, DistortionCategory, ItemId, RatingRecord};
pub use mos::{aggregate_mos, MosTable, ScreeningPolicy};
pub use saliency::{gaussian_blur, FixationMap, Norm, SaliencyMap};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/mos.md")]
    mod mos {}
    #[doc = include_str!("../../../book/src/saliency.md")]
    mod saliency {}
    #[doc = include_str!("../../../book/src/agreement.md")]
    mod agreement {}
    #[doc = include_str!("../../../book/src/saliency-metrics.md")]
    mod saliency_metrics {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
}
