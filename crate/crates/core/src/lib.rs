//! Multi-domain image-to-image translation with a single conditional
//! generator/discriminator pair.
//!
//! Domain labels from one or more partially labeled datasets are unified into
//! a single conditioning vector with a dataset mask ([`label`]). Networks are
//! described by declarative layer tables ([`arch`]) and materialized on a
//! small reverse-mode autodiff engine ([`autograd`], [`nn`]). Training
//! alternates critic and generator updates under a Wasserstein objective with
//! gradient penalty, auxiliary domain classification and cycle
//! reconstruction ([`loss`], [`train`]).

pub mod arch;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod label;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
