//! Detection of generated images by likelihood under a normalizing flow
//! trained against spectrally perturbed proxies of natural images.
//!
//! Pipeline: [`proxy`] builds proxy images, an external extractor turns images
//! into feature files ([`feature_store`]), [`trainer`] fits the
//! [`adapter`] and [`flow`] into a [`model::Model`], and [`scoring`] turns
//! per-image negative log-likelihoods into thresholds and benchmark metrics.

pub mod adapter;
pub mod cli;
pub mod feature_store;
pub mod flow;
pub mod model;
pub mod proxy;
pub mod scoring;
pub mod trainer;
