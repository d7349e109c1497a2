//! Filter pruning guided by ensemble knowledge.
//!
//! The crate covers the whole pipeline: prunable CNNs with FLOPs accounting
//! ([`netcore`]), dataset splits and augmentation ([`data`]), Taylor filter
//! scoring ([`scoring`]), the greedy sub-network search ([`search`]), the
//! interim-network memory bank ([`membank`]), fine-tuning ([`finetune`]),
//! loss-landscape analysis ([`landscape`]) and run orchestration
//! ([`harness`]).

pub mod arrays;
pub mod data;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod landscape;
pub mod loss;
pub mod membank;
pub mod netcore;
pub mod optim;
pub mod scoring;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use netcore::{BnMode, FilterRef, PrunableNetwork};
pub use tensor::{Dual, Scalar, Tensor};
