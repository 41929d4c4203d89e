//! Cumulative speaker and environment adaptation for BLSTM acoustic models.
//!
//! First-pass adaptation appends a per-utterance i-vector (GMM-UBM statistics
//! projected through a total-variability model) to every input frame.
//! Second-pass adaptation inserts identity-initialized affine transformation
//! layers into the network and trains them per speaker or per environment on
//! first-pass pseudo-labels.
//!
//! The crate is organized bottom-up:
//!
//! * [`features`]: filterbank frontends, derivatives, context splicing, LDA, CMVN
//! * [`gmm`]: diagonal GMMs, Baum-Welch statistics, two-class VAD
//! * [`ivector`]: total-variability training, extraction, normalization
//! * [`acoustic`]: BLSTM model with affine slots, backprop and training recipe
//! * [`adapt`]: unsupervised second-pass adaptation and evaluation
//! * [`corpus`]: synthetic corpora, feature archives and manifests
//! * [`container`], [`config`], [`report`], [`pipeline`]: persistence and experiment driver

// index loops read better in the numeric kernels; `!(x > 0.0)` also rejects NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustic;
pub mod adapt;
pub mod cli;
pub mod config;
pub mod container;
pub mod corpus;
pub mod error;
pub mod features;
pub mod gmm;
pub mod ivector;
pub mod pipeline;
pub mod report;
mod util;

pub use error::{Error, Result};
