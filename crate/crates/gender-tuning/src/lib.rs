//! Gender-tuning: debiasing a small encoder by joint masked-LM gender-word
//! perturbation and downstream fine-tuning, measured with WEAT/SEAT effect
//! sizes. Everything runs at desk scale on synthetic corpora; no external
//! pretrained weights are involved.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod lexicon;
pub mod manifest;
pub mod optim;
pub mod par;
pub mod perturbation;
pub mod seat;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
