use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parts of the network are present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Ablation 1: temporal-spatial branch removed.
    NoTemporalSpatial,
    /// Ablation 2: spatial-temporal branch removed.
    NoSpatialTemporal,
    /// Ablation 3: separable conv, its normalization and activation removed.
    NoFusion1,
    /// Ablation 4: pooling, log activation and dropout removed.
    NoFusion2,
    /// Full graph on a single chromophore (14 channels).
    SingleModality,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoTemporalSpatial,
        Variant::NoSpatialTemporal,
        Variant::NoFusion1,
        Variant::NoFusion2,
        Variant::SingleModality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTemporalSpatial => "no_temporal_spatial",
            Variant::NoSpatialTemporal => "no_spatial_temporal",
            Variant::NoFusion1 => "no_fusion1",
            Variant::NoFusion2 => "no_fusion2",
            Variant::SingleModality => "single_modality",
        }
    }

    pub fn has_spatial_temporal(self) -> bool {
        self != Variant::NoSpatialTemporal
    }

    pub fn has_temporal_spatial(self) -> bool {
        self != Variant::NoTemporalSpatial
    }

    pub fn has_fusion1(self) -> bool {
        self != Variant::NoFusion1
    }

    pub fn has_fusion2(self) -> bool {
        self != Variant::NoFusion2
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    /// Accepts the snake_case names plus `single` for [`Variant::SingleModality`].
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "single" {
            return Ok(Variant::SingleModality);
        }
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_samples: usize,
    /// Height of both spatial kernels; always the full channel count.
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
    pub st_spatial_filters: usize,
    pub st_temporal_filters: usize,
    pub ts_temporal_filters: usize,
    pub ts_spatial_filters: usize,
    pub separable_kernel: usize,
    pub separable_filters: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub dropout: f64,
    pub log_eps: f64,
    pub norm_eps: f64,
    pub bn_momentum: f64,
    /// Width of the pointwise dense layer before flattening.
    pub head_units: usize,
    pub classes: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 28,
            input_samples: 150,
            spatial_kernel: 28,
            temporal_kernel: 5,
            st_spatial_filters: 40,
            st_temporal_filters: 60,
            ts_temporal_filters: 20,
            ts_spatial_filters: 60,
            separable_kernel: 3,
            separable_filters: 10,
            pool_size: 25,
            pool_stride: 8,
            dropout: 0.3,
            log_eps: 1e-7,
            norm_eps: 1e-5,
            bn_momentum: 0.99,
            head_units: 2,
            classes: 2,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// Full graph on one chromophore: 14 channels, 14-high spatial kernels.
    pub fn single_modality() -> Self {
        ModelConfig {
            input_channels: 14,
            spatial_kernel: 14,
            variant: Variant::SingleModality,
            ..Default::default()
        }
    }

    /// Same hyperparameters with the channel count (and spatial kernel)
    /// adapted to the input.
    pub fn with_channels(mut self, channels: usize) -> Self {
        self.input_channels = channels;
        self.spatial_kernel = channels;
        if channels != 28 && self.variant == Variant::Full {
            self.variant = Variant::SingleModality;
        } else if channels == 28 && self.variant == Variant::SingleModality {
            self.variant = Variant::Full;
        }
        self
    }

    /// Temporal extent after either branch (valid temporal convolution).
    pub fn branch_samples(&self) -> Option<usize> {
        self.input_samples.checked_sub(self.temporal_kernel).map(|d| d + 1)
    }

    /// Checks value domains. Shape consistency is checked when building.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_channels", self.input_channels),
            ("input_samples", self.input_samples),
            ("spatial_kernel", self.spatial_kernel),
            ("temporal_kernel", self.temporal_kernel),
            ("st_spatial_filters", self.st_spatial_filters),
            ("st_temporal_filters", self.st_temporal_filters),
            ("ts_temporal_filters", self.ts_temporal_filters),
            ("ts_spatial_filters", self.ts_spatial_filters),
            ("separable_kernel", self.separable_kernel),
            ("separable_filters", self.separable_filters),
            ("pool_size", self.pool_size),
            ("pool_stride", self.pool_stride),
            ("head_units", self.head_units),
            ("classes", self.classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.spatial_kernel != self.input_channels {
            return Err(Error::config(
                "spatial_kernel",
                format!(
                    "{} must equal input_channels {}",
                    self.spatial_kernel, self.input_channels
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("{} not in [0, 1)", self.dropout)));
        }
        if !(self.log_eps > 0.0 && self.norm_eps > 0.0) {
            return Err(Error::config("eps", "log_eps and norm_eps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_momentum", "must be in [0, 1]"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        Ok(())
    }
}

/// Config for ablation study 1–4 of a full-variant base config.
pub fn ablate(config: &ModelConfig, study: u8) -> Result<ModelConfig> {
    if config.variant != Variant::Full {
        return Err(Error::config(
            "variant",
            format!("ablations start from the full model, got {}", config.variant.name()),
        ));
    }
    let variant = match study {
        1 => Variant::NoTemporalSpatial,
        2 => Variant::NoSpatialTemporal,
        3 => Variant::NoFusion1,
        4 => Variant::NoFusion2,
        other => return Err(Error::config("study", format!("{other} not in 1..=4"))),
    };
    Ok(ModelConfig {
        variant,
        ..config.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::single_modality().validate().unwrap();
        assert_eq!(ModelConfig::default().branch_samples(), Some(146));
    }

    #[test]
    fn spatial_kernel_must_span_channels() {
        let c = ModelConfig {
            spatial_kernel: 14,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablation_ids() {
        let base = ModelConfig::default();
        assert_eq!(ablate(&base, 1).unwrap().variant, Variant::NoTemporalSpatial);
        assert_eq!(ablate(&base, 4).unwrap().variant, Variant::NoFusion2);
        assert!(ablate(&base, 0).is_err());
        assert!(ablate(&base, 5).is_err());
        assert!(ablate(&ablate(&base, 2).unwrap(), 3).is_err());
    }

    #[test]
    fn channel_adaptation() {
        let c = ModelConfig::default().with_channels(14);
        assert_eq!((c.input_channels, c.spatial_kernel), (14, 14));
        assert_eq!(c.variant, Variant::SingleModality);
        assert_eq!(c.with_channels(28), ModelConfig::default());
    }

    #[test]
    fn partial_toml_like_override_fills_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"pool_size": 20}"#).unwrap();
        assert_eq!(c.pool_size, 20);
        assert_eq!(c.temporal_kernel, 5);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"pool_sise": 20}"#).is_err());
    }
}
