//! Corpus preparation, subword segmentation, a reference translator, back-translation
//! strategies, evaluation metrics and experiment orchestration for low-resource MT.

pub mod bt;
pub mod corpus;
pub mod experiment;
mod hash;
pub mod metrics;
pub mod subword;
pub mod synthetic;
pub mod translator;
