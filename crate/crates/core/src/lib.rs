//! Bifold teacher-student (BTS) semi-supervised presence detection for two
//! adjoining rooms from Wi-Fi CSI amplitudes.
//!
//! The crate covers the whole pipeline: synthetic CSI rounds ([`csi_sim`]),
//! normalization and windowing ([`preprocess`]), the training-free disarray
//! indicator ([`indicator`]), the primal/dual networks ([`nets`]) built on a
//! small reverse-mode autodiff ([`autograd`]), the five loss families
//! ([`losses`]), offline training, prediction, drift monitoring and
//! retraining ([`trainer`]), and the experiment harness ([`experiment`]).

pub mod autograd;
pub mod csi_sim;
pub mod error;
pub mod experiment;
pub mod indicator;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod preprocess;
pub mod trainer;

pub use csi_sim::{CaseId, ChannelScenario, CsiDataset, DriftProfile};
pub use error::{BtsError, Result};
