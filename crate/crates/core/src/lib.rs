//! Source-free multi-source domain adaptation on small synthetic problems.
//!
//! Several source models, each trained on its own labeled domain, are adapted
//! to an unlabeled target without access to source data. Feature extractors
//! and a weighting over the sources are learned jointly; classifier heads stay
//! frozen.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod autodiff;
pub mod cli;
pub mod distill;
pub mod domains;
pub mod error;
pub mod models;
pub mod optim;
pub mod oracle;
pub mod tensor;

pub use error::{Error, Result};
