//! Experiment profiles: the full-scale protocol and a desk-scale profile
//! sized to reproduce the directional findings in minutes on a laptop CPU.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use threetank_models::{
    ArchConfig, ArchKind, GruArConfig, GruConfig, MlpConfig, TcnConfig, TcnFaeConfig,
    TransformerCeConfig, TransformerConfig,
};
use threetank_sim::SplitCounts;
use threetank_train::TrainConfig;

use crate::{BenchError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 200/50/50 samples, max 150 epochs, 3 seeds, compact architectures.
    Desk,
    /// 1000/100/100 samples, max 1000 epochs, full-size architectures.
    Paper,
}

impl Profile {
    pub const ALL: [Profile; 2] = [Profile::Desk, Profile::Paper];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }

    pub fn counts(self) -> SplitCounts {
        match self {
            Profile::Desk => SplitCounts::DESK,
            Profile::Paper => SplitCounts::FULL,
        }
    }

    pub fn max_epochs(self) -> usize {
        match self {
            Profile::Desk => 150,
            Profile::Paper => 1000,
        }
    }

    pub fn default_seeds(self) -> Vec<u64> {
        vec![1, 2, 3]
    }

    /// Architecture sizing for this profile. Desk sizes trade capacity for
    /// wall time; full sizes are the library defaults.
    pub fn arch_config(self, kind: ArchKind) -> ArchConfig {
        match self {
            Profile::Paper => ArchConfig::default_for(kind),
            Profile::Desk => match kind {
                ArchKind::Mlp => ArchConfig::Mlp(MlpConfig { hidden: vec![128, 128], dropout: 0.0 }),
                ArchKind::Gru => ArchConfig::Gru(GruConfig { hidden: 32, layers: 1, dropout: 0.0 }),
                ArchKind::GruAr => {
                    ArchConfig::GruAr(GruArConfig { hidden: 32, layers: 1, dropout: 0.0 })
                }
                ArchKind::Tcn => {
                    ArchConfig::Tcn(TcnConfig { channels: 16, kernel: 3, blocks: 4, dropout: 0.0 })
                }
                ArchKind::TcnFae => ArchConfig::TcnFae(TcnFaeConfig {
                    channels: 16,
                    kernel: 3,
                    blocks: 4,
                    latent: 8,
                    decoder_hidden: 64,
                    recon_weight: 0.5,
                    dropout: 0.0,
                }),
                ArchKind::Transformer => ArchConfig::Transformer(TransformerConfig {
                    d_model: 16,
                    heads: 1,
                    enc_layers: 1,
                    dec_layers: 1,
                    ff: 32,
                    dropout: 0.0,
                }),
                ArchKind::TransformerCe => ArchConfig::TransformerCe(TransformerCeConfig {
                    d_model: 16,
                    heads: 1,
                    enc_layers: 1,
                    dec_layers: 1,
                    ff: 32,
                    dropout: 0.0,
                    embed_layers: 2,
                    embed_kernel: 3,
                }),
            },
        }
    }

    /// The training protocol at this profile: Adam at 1e-3, batches of 32,
    /// halve-on-plateau after 25 stale epochs, stop after 50.
    pub fn train_config(self, seed: u64) -> TrainConfig {
        TrainConfig { max_epochs: self.max_epochs(), seed, ..TrainConfig::default() }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| BenchError::Invalid(format!("unknown profile '{s}' (expected desk or paper)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_expose_the_documented_scales() {
        assert_eq!(Profile::Desk.counts(), SplitCounts::DESK);
        assert_eq!(Profile::Paper.counts(), SplitCounts::FULL);
        assert_eq!(Profile::Desk.max_epochs(), 150);
        assert_eq!(Profile::Paper.max_epochs(), 1000);
        assert_eq!(Profile::Desk.default_seeds(), vec![1, 2, 3]);
        assert_eq!("desk".parse::<Profile>().unwrap(), Profile::Desk);
        assert!("lab".parse::<Profile>().is_err());
    }

    #[test]
    fn every_arch_config_is_valid_and_matches_its_kind() {
        for profile in Profile::ALL {
            for kind in ArchKind::ALL {
                let cfg = profile.arch_config(kind);
                assert_eq!(cfg.kind(), kind);
                cfg.validate().unwrap();
            }
            profile.train_config(7).validate().unwrap();
            assert_eq!(profile.train_config(7).seed, 7);
            assert_eq!(profile.train_config(7).max_epochs, profile.max_epochs());
        }
    }
}
