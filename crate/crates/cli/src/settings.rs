//! Flat key-value run settings. Every key has a matching command-line flag
//! and flags win over the file.

use std::path::Path;

use bts_core::experiment::ExperimentSpec;
use bts_core::nets::NetConfig;
use bts_core::trainer::TrainConfig;
use bts_core::{BtsError, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetSize {
    /// Reduced widths for single-core runs.
    Desk,
    /// Full-size networks.
    Full,
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Seed of the generated rounds.
    #[arg(long, global = true)]
    pub data_seed: Option<u64>,
    /// Seed of the room geometry shared by all rounds.
    #[arg(long, global = true)]
    pub env_seed: Option<u64>,
    /// Packets per case per round.
    #[arg(long, global = true)]
    pub packets: Option<usize>,
    /// Window length in packets.
    #[arg(long, global = true)]
    pub tau: Option<usize>,
    /// Diversity constant.
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    /// Weight of the deviation term in the disarray.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Exponent of the deviation term.
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Weight of the labeled teacher loss.
    #[arg(long, global = true)]
    pub lambda1: Option<f64>,
    /// Weight of the feedback-scaled unlabeled teacher loss.
    #[arg(long, global = true)]
    pub lambda2: Option<f64>,
    /// Weight of the cross-pair projection agreement.
    #[arg(long, global = true)]
    pub lambda3: Option<f64>,
    /// Weight of the hypersphere compactness loss.
    #[arg(long, global = true)]
    pub lambda4: Option<f64>,
    /// Drift threshold on the outlier distance.
    #[arg(long, global = true)]
    pub dth: Option<f64>,
    /// Frames in the drift window.
    #[arg(long, global = true)]
    pub window: Option<usize>,
    /// Training iterations.
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    /// Frames per labeled and per unlabeled batch.
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Learning rate of every network.
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Network size.
    #[arg(long, global = true, value_enum)]
    pub net: Option<NetSize>,
}

macro_rules! prefer {
    ($out:ident, $base:ident, $($field:ident),*) => {
        $( $out.$field = $out.$field.or($base.$field); )*
    };
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).map_err(|e| BtsError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| BtsError::Config(format!("{}: {e}", path.display())))
    }

    /// Keep every value set here; fill the rest from `base`.
    pub fn over(mut self, base: &Settings) -> Settings {
        prefer!(
            self, base, seed, data_seed, env_seed, packets, tau, eta, alpha, beta, lambda1, lambda2, lambda3, lambda4, dth,
            window, iters, batch, lr, net
        );
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn net_config(&self) -> NetConfig {
        let mut net = match self.net.unwrap_or(NetSize::Desk) {
            NetSize::Desk => NetConfig::desk(),
            NetSize::Full => NetConfig::default(),
        };
        if let Some(v) = self.tau {
            net.tau = v;
        }
        if let Some(v) = self.eta {
            net.eta = v;
        }
        net
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let base = match self.net.unwrap_or(NetSize::Desk) {
            NetSize::Desk => TrainConfig::desk(),
            NetSize::Full => TrainConfig::default(),
        };
        let mut cfg = TrainConfig { net: self.net_config(), ..base };
        let s = self;
        if let Some(v) = s.seed {
            cfg = cfg.with_seed(v);
        }
        if let Some(v) = s.alpha {
            cfg.disarray.alpha = v;
        }
        if let Some(v) = s.beta {
            cfg.disarray.beta = v;
        }
        if let Some(v) = s.lambda1 {
            cfg.weights.lambda1 = v;
        }
        if let Some(v) = s.lambda2 {
            cfg.weights.lambda2 = v;
        }
        if let Some(v) = s.lambda3 {
            cfg.weights.lambda3 = v;
        }
        if let Some(v) = s.lambda4 {
            cfg.weights.lambda4 = v;
        }
        if let Some(v) = s.dth {
            cfg.drift_threshold = v;
        }
        if let Some(v) = s.window {
            cfg.drift_window = v;
        }
        if let Some(v) = s.iters {
            cfg.iterations = v;
        }
        if let Some(v) = s.batch {
            cfg.batch = v;
        }
        if let Some(v) = s.lr {
            cfg.optimizer.lr = v;
            cfg.student_optimizer.lr = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn experiment(&self) -> ExperimentSpec {
        let mut spec = ExperimentSpec::default();
        if let Some(v) = self.data_seed {
            spec.seed = v;
        }
        if let Some(v) = self.env_seed {
            spec.env_seed = v;
        }
        if let Some(v) = self.packets {
            spec.packets = v;
        }
        spec
    }
}
