use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::capsule::MarginLossParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchFamily {
    ConvnetFc,
    ConvnetAvg,
    ConvnetR,
    ConvnetCr,
    ConvnetCrSf,
    Capsnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingKind {
    Dynamic,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionKind {
    None,
    Normal,
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Margin,
    CrossEntropy,
    BinaryCrossEntropy,
}

macro_rules! snake_case_names {
    ($ty:ty { $($variant:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $(<$ty>::$variant => $name),* }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(<$ty>::$variant),)*
                    _ => Err(Error::Config(format!(
                        "unknown {} {s:?}, expected one of {:?}",
                        stringify!($ty),
                        [$($name),*]
                    ))),
                }
            }
        }
    };
}

snake_case_names!(ArchFamily {
    ConvnetFc => "convnet_fc",
    ConvnetAvg => "convnet_avg",
    ConvnetR => "convnet_r",
    ConvnetCr => "convnet_cr",
    ConvnetCrSf => "convnet_cr_sf",
    Capsnet => "capsnet",
});
snake_case_names!(RoutingKind { Dynamic => "dynamic", None => "none" });
snake_case_names!(ReconstructionKind { None => "none", Normal => "normal", Conditional => "conditional" });
snake_case_names!(LossKind {
    Margin => "margin",
    CrossEntropy => "cross_entropy",
    BinaryCrossEntropy => "binary_cross_entropy",
});

pub const KERNEL_SIZES: [usize; 5] = [3, 5, 7, 9, 11];

/// Every architectural switch. The default is the full-scale CapsNet on the
/// 40x40 task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub arch_family: ArchFamily,
    pub routing: RoutingKind,
    pub routing_iterations: usize,
    pub detach_routing: bool,
    pub shared_transm: bool,
    pub squash_enabled: bool,
    pub reconstruction: ReconstructionKind,
    pub loss: LossKind,
    pub kernel_size: usize,
    pub input_size: usize,
    pub channel_width: usize,
    pub fc_widths: Vec<usize>,
    pub num_classes: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub recon_loss_scale: f64,
    pub margin: MarginLossParams,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            arch_family: ArchFamily::Capsnet,
            routing: RoutingKind::Dynamic,
            routing_iterations: 3,
            detach_routing: false,
            shared_transm: false,
            squash_enabled: true,
            reconstruction: ReconstructionKind::Conditional,
            loss: LossKind::Margin,
            kernel_size: 9,
            input_size: 40,
            channel_width: 256,
            fc_widths: vec![328, 192],
            num_classes: 10,
            d_in: 8,
            d_out: 16,
            recon_loss_scale: 0.0005,
            margin: MarginLossParams::default(),
        }
    }
}

/// Named models, in the order they are usually tabulated.
pub const PRESETS: [&str; 10] = [
    "capsnet",
    "capsnet_nor",
    "aff_capsnet",
    "aff_capsnet_dr",
    "convnet_avg",
    "convnet_fc",
    "convnet_fc_lk",
    "convnet_r",
    "convnet_cr",
    "convnet_cr_sf",
];

impl AblationConfig {
    /// A named model at full scale. `convnet_fc_lk` still needs its FC
    /// widths fitted with [`super::fit_fc_widths`].
    pub fn preset(name: &str) -> Result<Self> {
        let caps = AblationConfig::default();
        let convnet = |family, reconstruction, loss| AblationConfig {
            arch_family: family,
            routing: RoutingKind::None,
            reconstruction,
            loss,
            ..AblationConfig::default()
        };
        Ok(match name {
            "capsnet" => caps,
            "capsnet_nor" => AblationConfig { routing: RoutingKind::None, ..caps },
            "aff_capsnet" => AblationConfig { routing: RoutingKind::None, shared_transm: true, ..caps },
            "aff_capsnet_dr" => AblationConfig { shared_transm: true, ..caps },
            "convnet_avg" => convnet(ArchFamily::ConvnetAvg, ReconstructionKind::None, LossKind::CrossEntropy),
            "convnet_fc" => AblationConfig {
                kernel_size: 5,
                ..convnet(ArchFamily::ConvnetFc, ReconstructionKind::None, LossKind::CrossEntropy)
            },
            "convnet_fc_lk" => convnet(ArchFamily::ConvnetFc, ReconstructionKind::None, LossKind::CrossEntropy),
            "convnet_r" => convnet(ArchFamily::ConvnetR, ReconstructionKind::Normal, LossKind::Margin),
            "convnet_cr" => convnet(ArchFamily::ConvnetCr, ReconstructionKind::Conditional, LossKind::Margin),
            "convnet_cr_sf" => convnet(ArchFamily::ConvnetCrSf, ReconstructionKind::Conditional, LossKind::Margin),
            other => return Err(Error::Config(format!("unknown model preset {other:?}, expected one of {PRESETS:?}"))),
        })
    }

    /// Units in the class-grouped representation layer.
    pub fn representation_width(&self) -> usize {
        self.num_classes * self.d_out
    }

    pub fn is_capsule_like(&self) -> bool {
        matches!(self.arch_family, ArchFamily::Capsnet | ArchFamily::ConvnetCrSf)
    }

    pub fn has_representation(&self) -> bool {
        !matches!(self.arch_family, ArchFamily::ConvnetFc | ArchFamily::ConvnetAvg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !KERNEL_SIZES.contains(&self.kernel_size) {
            return bad(format!("model.kernel_size must be one of {KERNEL_SIZES:?}, got {}", self.kernel_size));
        }
        if self.input_size == 0 || self.channel_width == 0 || self.num_classes < 2 || self.d_in == 0 || self.d_out == 0 {
            return bad("model sizes must be positive (num_classes >= 2)".into());
        }
        if self.is_capsule_like() && self.channel_width % self.d_in != 0 {
            return bad(format!(
                "model.channel_width {} is not a multiple of d_in {}",
                self.channel_width, self.d_in
            ));
        }
        if self.arch_family == ArchFamily::ConvnetFc {
            if self.channel_width < 2 {
                return bad("model.channel_width must be >= 2 for convnet_fc".into());
            }
            if self.fc_widths.len() != 2 || self.fc_widths.contains(&0) {
                return bad(format!("model.fc_widths must hold two positive widths, got {:?}", self.fc_widths));
            }
        }
        if self.arch_family == ArchFamily::Capsnet && self.routing == RoutingKind::Dynamic && self.routing_iterations < 1 {
            return bad("model.routing_iterations must be >= 1".into());
        }
        match (self.reconstruction, self.arch_family) {
            (ReconstructionKind::None, _) => {}
            (_, ArchFamily::ConvnetFc | ArchFamily::ConvnetAvg) => {
                return bad(format!("{} has no 160-unit representation to reconstruct from", self.arch_family));
            }
            (ReconstructionKind::Conditional, ArchFamily::ConvnetR) => {
                return bad("conditional reconstruction needs a class-grouped representation; convnet_r is ungrouped".into());
            }
            _ => {}
        }
        if !(self.recon_loss_scale >= 0.0 && self.recon_loss_scale.is_finite()) {
            return bad(format!("model.recon_loss_scale must be finite and >= 0, got {}", self.recon_loss_scale));
        }
        self.margin.validate()
    }
}
