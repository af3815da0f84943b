//! Toy-scale video captioning and contrastive learning on a from-scratch
//! reverse-mode autodiff engine.

mod binio;

pub mod autodiff;
pub mod cache;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hash;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Graph, Var};
pub use cache::TokenCache;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{AdaptorMode, ModelConfig, TextBatch, VideoBatch, VideoCoCa};
pub use params::{Component, ParameterStore};
pub use tensor::{Real, Tensor};
