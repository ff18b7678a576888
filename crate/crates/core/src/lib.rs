//! Sparse whole-slide image classification and pN staging.
//!
//! A slide is reduced to a tissue mask at a coarse level, a handful of
//! patches are sampled from it and classified by a small DenseNet under
//! all eight symmetries of the square, and the per-class maxima give the
//! slide label. Up to five slide labels stage a patient.
//!
//! Modules, bottom up: [`slide`] (pyramid container), [`roi`] (mask,
//! median filter, patch sampling), [`nn`] (tensors, autodiff, Adam,
//! checkpoints), [`densenet`], [`augment`], [`aggregate`], [`synth`]
//! (synthetic slides) and [`pipeline`] (training, inference, benchmark).

pub mod aggregate;
pub mod augment;
pub mod densenet;
pub mod nn;
pub mod pipeline;
pub mod roi;
pub mod slide;
pub mod synth;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod book_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/slides.md")]
pub mod book_slides {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/roi.md")]
pub mod book_roi {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/network.md")]
pub mod book_network {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/augmentation.md")]
pub mod book_augmentation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/aggregation.md")]
pub mod book_aggregation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod book_pipeline {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
pub mod book_cli {}
