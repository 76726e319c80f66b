use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where channel summation, spatial reduction and fusion happen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    /// Sum keypoint channels at 56×56, then reduce the single map to 28×28.
    A,
    /// Reduce all keypoint channels to 28×28, then sum.
    B,
    /// Upsample the mask logits to 56×56 and fuse there.
    C,
    /// Keypoint head stops at 28×28; sum and fuse directly.
    D,
}

/// 56→28 spatial reduction of keypoint maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Maxpool,
    Avgpool,
    StridedConv,
}

/// How the single-channel keypoint map `O_k` meets the mask logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Add,
    Max,
    Multiply,
}

macro_rules! str_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

str_enum!(Design { "a" => Design::A, "b" => Design::B, "c" => Design::C, "d" => Design::D });
str_enum!(Reduction {
    "maxpool" => Reduction::Maxpool,
    "avgpool" => Reduction::Avgpool,
    "strided_conv" => Reduction::StridedConv,
});
str_enum!(FusionMode {
    "add" => FusionMode::Add,
    "max" => FusionMode::Max,
    "multiply" => FusionMode::Multiply,
});

/// Structure of the keypoint branch and its fusion into the mask branch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub design: Design,
    pub reduction: Reduction,
    pub mode: FusionMode,
    /// Number of sampled boundary points.
    pub k: usize,
    /// Adds the object centroid as keypoint channel `k`.
    pub use_center: bool,
    /// Weight of the keypoint loss.
    pub alpha: f64,
    /// When false the mask logits are used unfused.
    pub enabled: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            design: Design::B,
            reduction: Reduction::StridedConv,
            mode: FusionMode::Multiply,
            k: 100,
            use_center: true,
            alpha: 0.5,
            enabled: true,
        }
    }
}

impl FusionConfig {
    pub fn keypoint_channels(&self) -> usize {
        self.k + usize::from(self.use_center)
    }

    /// Side of the keypoint heatmap grid.
    pub fn keypoint_resolution(&self) -> usize {
        match self.design {
            Design::D => 28,
            _ => 56,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Layer widths and head geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Channels of the stride-4 feature map.
    pub backbone_channels: usize,
    /// Side of the RoI feature grid.
    pub roi_size: usize,
    pub box_hidden: usize,
    /// Width of the four mask-head convolutions (256 in the full-size model).
    pub mask_channels: usize,
    /// Width of the eight keypoint-head convolutions (512 in the full-size model).
    pub keypoint_channels: usize,
    /// Build the keypoint branch at all. `false` gives a mask-only model.
    pub keypoint_head: bool,
    /// Design C: average-pool the fused 56×56 prediction back to 28×28 at
    /// inference.
    pub design_c_report_28: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            backbone_channels: 64,
            roi_size: 14,
            box_hidden: 256,
            mask_channels: 64,
            keypoint_channels: 64,
            keypoint_head: true,
            design_c_report_28: false,
        }
    }
}

impl ModelConfig {
    /// Widths used by the full-size head architecture.
    pub fn full_widths() -> Self {
        Self {
            backbone_channels: 256,
            mask_channels: 256,
            keypoint_channels: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.backbone_channels < 2 || self.roi_size < 2 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if !self.roi_size.is_multiple_of(2) {
            return Err(Error::Config("roi_size must be even".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_parsing() {
        let f = FusionConfig::default();
        assert_eq!(
            (f.design, f.reduction, f.mode, f.k, f.use_center, f.alpha),
            (Design::B, Reduction::StridedConv, FusionMode::Multiply, 100, true, 0.5)
        );
        assert_eq!(f.keypoint_channels(), 101);
        assert_eq!("strided_conv".parse::<Reduction>().unwrap(), Reduction::StridedConv);
        assert_eq!(Reduction::Avgpool.to_string(), "avgpool");
        assert!("sideways".parse::<FusionMode>().is_err());
        let json = serde_json::to_string(&f).unwrap();
        assert!(json.contains("\"design\":\"b\"") && json.contains("\"mode\":\"multiply\""));
        let partial: FusionConfig = serde_json::from_str(r#"{"mode":"add","k":16}"#).unwrap();
        assert_eq!((partial.mode, partial.k, partial.alpha), (FusionMode::Add, 16, 0.5));
    }
}
