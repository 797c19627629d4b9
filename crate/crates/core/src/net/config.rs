use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Residual {
    Sum,
    None,
}

/// Named combinations of long and short residual connections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Long residual only.
    ResDsn,
    /// Long and short residuals.
    FResDsn,
    /// Short residual only.
    SResDsn,
    /// Neither.
    Dsn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::ResDsn, Variant::FResDsn, Variant::SResDsn, Variant::Dsn];

    pub fn residuals(self) -> (Residual, Residual) {
        match self {
            Variant::ResDsn => (Residual::Sum, Residual::None),
            Variant::FResDsn => (Residual::Sum, Residual::Sum),
            Variant::SResDsn => (Residual::None, Residual::Sum),
            Variant::Dsn => (Residual::None, Residual::None),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Window extent `(x, y, z)` in voxels.
    pub input_size: [usize; 3],
    pub stage_channels: [usize; 4],
    pub long_residual: Residual,
    pub short_residual: Residual,
    pub deep_supervision: bool,
    pub aux_weights: [f64; 2],
    pub weight_decay: f64,
    pub num_classes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: [64; 3],
            stage_channels: [32, 64, 128, 256],
            long_residual: Residual::Sum,
            short_residual: Residual::None,
            deep_supervision: true,
            aux_weights: [0.2, 0.4],
            weight_decay: 0.0005,
            num_classes: 2,
        }
    }
}

impl NetworkConfig {
    /// Desk-scale preset: 16^3 windows, channels 4-8-16-32.
    pub fn tiny() -> Self {
        NetworkConfig {
            input_size: [16; 3],
            stage_channels: [4, 8, 16, 32],
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.long_residual, self.short_residual) = v.residuals();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.input_size.iter().find(|&&s| s == 0 || s % 8 != 0) {
            return Err(invalid_arg!("input extent {s} must be a positive multiple of 8"));
        }
        if self.stage_channels.contains(&0) {
            return Err(invalid_arg!("stage channel counts must be positive: {:?}", self.stage_channels));
        }
        if self.aux_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid_arg!("auxiliary weights must be non-negative: {:?}", self.aux_weights));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(invalid_arg!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.num_classes != 2 {
            return Err(invalid_arg!("only two-class segmentation is supported, got {}", self.num_classes));
        }
        Ok(())
    }

    /// Spatial tensor shape `[d, h, w]` of one input window.
    pub fn window_shape(&self) -> [usize; 3] {
        let [x, y, z] = self.input_size;
        [z, y, x]
    }
}
