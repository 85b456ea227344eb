//! TOML run configuration. Every knob has a default matching the standard
//! CIFAR search protocol, so a config file only needs to state deviations.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_synthetic, read_cifar10, Dataset};
use crate::error::{Error, Result};
use crate::space::{MaskMode, NetSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    /// Channel sampling divisor: each edge's mixture sees ⌈C/K⌉ channels.
    pub k: usize,
    pub nodes: usize,
    pub layers: usize,
    pub c0: usize,
    pub epochs: usize,
    pub warm_up_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub partial_connection: bool,
    pub edge_normalization: bool,
    pub mask_mode: MaskMode,
    pub bn_affine: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            k: 4,
            nodes: 6,
            layers: 8,
            c0: 16,
            epochs: 50,
            warm_up_epochs: 15,
            batch_size: 256,
            seed: 0,
            partial_connection: true,
            edge_normalization: true,
            mask_mode: MaskMode::Efficient,
            bn_affine: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightOptSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for WeightOptSection {
    fn default() -> Self {
        WeightOptSection { lr: 0.1, momentum: 0.9, weight_decay: 3e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchOptSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for ArchOptSection {
    fn default() -> Self {
        ArchOptSection { lr: 6e-4, beta1: 0.5, beta2: 0.999, weight_decay: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    /// Directory holding the CIFAR-10 binary batch files.
    pub dir: String,
    pub classes: usize,
    pub resolution: usize,
    pub count: usize,
    pub noise: f64,
    pub augment: bool,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::Synthetic,
            dir: String::new(),
            classes: 2,
            resolution: 8,
            count: 2000,
            noise: 0.25,
            augment: false,
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub search: SearchSection,
    pub weight_opt: WeightOptSection,
    pub arch_opt: ArchOptSection,
    pub data: DataSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.search;
        if s.k == 0 {
            return Err(Error::Config("search.k must be ≥ 1".into()));
        }
        if s.nodes < 3 {
            return Err(Error::Config("search.nodes must be ≥ 3".into()));
        }
        if s.layers == 0 {
            return Err(Error::Config("search.layers must be ≥ 1".into()));
        }
        if s.epochs == 0 {
            return Err(Error::Config("search.epochs must be ≥ 1".into()));
        }
        if s.warm_up_epochs >= s.epochs {
            return Err(Error::Config(format!(
                "warm_up_epochs ({}) must be < epochs ({})",
                s.warm_up_epochs, s.epochs
            )));
        }
        if s.batch_size == 0 {
            return Err(Error::Config("search.batch_size must be ≥ 1".into()));
        }
        if self.weight_opt.lr <= 0.0 || self.arch_opt.lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.data.classes < 2 {
            return Err(Error::Config("data.classes must be ≥ 2".into()));
        }
        Ok(())
    }

    /// Network shape implied by this config; disabling partial connection is
    /// the K=1 special case.
    pub fn net_spec(&self, classes: usize) -> NetSpec {
        let s = &self.search;
        NetSpec {
            layers: s.layers,
            c0: s.c0,
            n_nodes: s.nodes,
            k: if s.partial_connection { s.k } else { 1 },
            classes,
            edge_norm: s.edge_normalization,
            mask_mode: s.mask_mode,
            bn_affine: s.bn_affine,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.data.kind {
            DataKind::Synthetic => make_synthetic(
                self.data.classes,
                self.data.resolution,
                self.data.count,
                self.data.noise,
                self.search.seed,
            ),
            DataKind::Cifar10 => {
                read_cifar10(Path::new(&self.data.dir), self.data.mean, self.data.std)
            }
        }
    }

    /// Content hash of the fully resolved configuration (hex SHA-256 of its
    /// canonical TOML rendering).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
