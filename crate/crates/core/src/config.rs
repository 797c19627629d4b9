//! Run configuration and cross-validation splits.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::c2f::C2fOptions;
use crate::error::{invalid_arg, Error, Result};
use crate::metrics::Connectivity;
use crate::net::NetworkConfig;
use crate::rng::{stream, Purpose};
use crate::tiling::FusionMode;
use crate::train::{OptimConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub optim: OptimConfig,
    /// Box margin `m` in voxels, shared by fine sampling and cropping.
    pub margin: usize,
    pub coarse_overlap: usize,
    pub fine_overlap: usize,
    pub fusion: FusionMode,
    pub filter_fraction: f64,
    pub connectivity: Connectivity,
    /// Multiply the fine-stage input by the coarse mask before cropping.
    pub mask_input: bool,
    /// Windows per forward pass at inference.
    pub infer_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let c2f = C2fOptions::default();
        RunConfig {
            seed: 0,
            network: NetworkConfig::default(),
            optim: OptimConfig::default(),
            margin: c2f.margin,
            coarse_overlap: c2f.coarse_overlap,
            fine_overlap: c2f.fine_overlap,
            fusion: c2f.fusion,
            filter_fraction: c2f.filter_fraction,
            connectivity: c2f.connectivity,
            mask_input: c2f.mask_input,
            infer_batch: c2f.batch,
        }
    }
}

impl RunConfig {
    /// Desk-scale preset: tiny network, batch 4.
    pub fn tiny() -> Self {
        RunConfig {
            network: NetworkConfig::tiny(),
            optim: OptimConfig {
                batch_size: 4,
                iterations: 2000,
                ..OptimConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Second evaluation protocol: vote fusion and a 0.05 filter.
    pub fn with_vote_protocol(mut self) -> Self {
        self.fusion = FusionMode::Vote;
        self.filter_fraction = 0.05;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.optim.validate()?;
        if !(0.0..=1.0).contains(&self.filter_fraction) {
            return Err(invalid_arg!("filter_fraction must lie in [0, 1], got {}", self.filter_fraction));
        }
        if self.infer_batch == 0 {
            return Err(invalid_arg!("infer_batch must be positive"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            network: self.network.clone(),
            optim: self.optim.clone(),
            fine_margin: self.margin,
        }
    }

    pub fn c2f_options(&self) -> C2fOptions {
        C2fOptions {
            coarse_overlap: self.coarse_overlap,
            fine_overlap: self.fine_overlap,
            margin: self.margin,
            fusion: self.fusion,
            filter_fraction: self.filter_fraction,
            connectivity: self.connectivity,
            mask_input: self.mask_input,
            batch: self.infer_batch,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

pub const NUM_FOLDS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

impl SplitManifest {
    /// Seeded shuffle, then contiguous chunks whose sizes differ by at most one.
    pub fn new(ids: &[String], seed: u64, folds: usize) -> Result<Self> {
        if folds == 0 {
            return Err(invalid_arg!("fold count must be positive"));
        }
        let mut sorted = ids.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return Err(invalid_arg!("case ids must be unique"));
        }
        let mut rng = stream(seed, Purpose::Split, 0, 0);
        sorted.shuffle(&mut rng);
        let (base, extra) = (sorted.len() / folds, sorted.len() % folds);
        let mut out = Vec::with_capacity(folds);
        let mut rest = sorted.as_slice();
        for k in 0..folds {
            let (head, tail) = rest.split_at(base + (k < extra) as usize);
            out.push(head.to_vec());
            rest = tail;
        }
        Ok(SplitManifest { seed, folds: out })
    }

    /// `(train, test)` ids for fold `k`.
    pub fn fold(&self, k: usize) -> Result<(Vec<String>, Vec<String>)> {
        let test = self
            .folds
            .get(k)
            .ok_or_else(|| invalid_arg!("fold {k} out of range 0..{}", self.folds.len()))?
            .clone();
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        Ok((train, test))
    }
}
