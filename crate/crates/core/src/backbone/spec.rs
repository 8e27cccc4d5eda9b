use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::strf::StrfConfig;

/// Residual block family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockVariant {
    /// Inflated 2-D bottleneck: 1x1x1, 1x3x3, 1x1x1.
    C2D,
    /// Middle convolution 3x3x3.
    I3D,
    /// 1x3x3 followed by 3x1x1.
    P3DA,
    /// 1x3x3 and 3x1x1 in parallel, summed.
    P3DB,
    /// 1x3x3 followed by 3x1x1, with a skip from the spatial output.
    P3DC,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 5] = [
        BlockVariant::C2D,
        BlockVariant::I3D,
        BlockVariant::P3DA,
        BlockVariant::P3DB,
        BlockVariant::P3DC,
    ];

    /// Whether the block has a convolution with temporal extent > 1.
    pub fn has_temporal_conv(self) -> bool {
        self != BlockVariant::C2D
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockVariant::C2D => "c2d",
            BlockVariant::I3D => "i3d",
            BlockVariant::P3DA => "p3da",
            BlockVariant::P3DB => "p3db",
            BlockVariant::P3DC => "p3dc",
        })
    }
}

impl FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown block variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub variant: BlockVariant,
    pub in_width: usize,
    pub out_width: usize,
    pub spatial_stride: usize,
    pub strf: Option<StrfConfig>,
}

impl BlockSpec {
    pub fn bottleneck(&self) -> usize {
        self.out_width / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_width < 4 || !self.out_width.is_multiple_of(4) || self.in_width == 0 {
            return Err(Error::Config(format!(
                "block widths {} -> {} must be positive with the output divisible by 4",
                self.in_width, self.out_width
            )));
        }
        if self.spatial_stride == 0 {
            return Err(Error::Config("spatial stride must be >= 1".into()));
        }
        if let Some(cfg) = &self.strf {
            if self.variant == BlockVariant::C2D {
                return Err(Error::Config(
                    "C2D blocks have no temporal convolution to attach STRF to".into(),
                ));
            }
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn needs_projection(&self) -> bool {
        self.in_width != self.out_width || self.spatial_stride != 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub blocks: usize,
    /// Output width of every block in the stage.
    pub width: usize,
    pub variant: BlockVariant,
    pub strf: bool,
}

/// Layout of a four-stage residual network with an inflated stem.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub stem_width: usize,
    pub stem_kernel: [usize; 3],
    pub stages: [StageSpec; 4],
    pub num_classes: usize,
    pub strf: StrfConfig,
}

/// Spatial stride of each stage; the last stage keeps resolution.
pub const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 1];
pub const RESNET50_BLOCKS: [usize; 4] = [3, 4, 6, 3];
pub const RESNET50_WIDTHS: [usize; 4] = [256, 512, 1024, 2048];
pub const RESNET50_STEM: usize = 64;

impl NetworkSpec {
    /// Inflated ResNet-50 with `variant` blocks on `variant_stages` (1-based),
    /// C2D blocks elsewhere, and STRF on `strf_stages`.
    pub fn resnet50(
        variant: BlockVariant,
        variant_stages: &[usize],
        strf_stages: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        Self::scaled(1, RESNET50_BLOCKS, variant, variant_stages, strf_stages, num_classes)
    }

    /// ResNet-50 layout with every width divided by `divisor` and custom
    /// block counts.
    pub fn scaled(
        divisor: usize,
        blocks: [usize; 4],
        variant: BlockVariant,
        variant_stages: &[usize],
        strf_stages: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if divisor == 0 || !RESNET50_STEM.is_multiple_of(divisor) {
            return Err(Error::Config(format!("width divisor {divisor} must divide 64")));
        }
        for &s in variant_stages.iter().chain(strf_stages) {
            if !(1..=4).contains(&s) {
                return Err(Error::Config(format!("stage {s} out of range 1..=4")));
            }
        }
        let stages = std::array::from_fn(|i| StageSpec {
            blocks: blocks[i],
            width: RESNET50_WIDTHS[i] / divisor,
            variant: if variant_stages.contains(&(i + 1)) {
                variant
            } else {
                BlockVariant::C2D
            },
            strf: strf_stages.contains(&(i + 1)),
        });
        let spec = Self {
            stem_width: RESNET50_STEM / divisor,
            stem_kernel: [1, 7, 7],
            stages,
            num_classes,
            strf: StrfConfig::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Widths divided by 16 and one block per stage.
    pub fn toy(variant: BlockVariant, strf: bool, num_classes: usize) -> Result<Self> {
        let strf_stages: &[usize] = if strf { &[2, 3] } else { &[] };
        Self::scaled(16, [1, 1, 1, 1], variant, &[2, 3], strf_stages, num_classes)
    }

    pub fn feature_dim(&self) -> usize {
        self.stages[3].width
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.stem_width == 0 {
            return Err(Error::Config("class count and stem width must be positive".into()));
        }
        if self.stem_kernel.contains(&0) {
            return Err(Error::Config("stem kernel extents must be positive".into()));
        }
        for stage in self.block_specs() {
            for b in stage {
                b.validate()?;
            }
        }
        if self.stages.iter().any(|s| s.blocks == 0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        Ok(())
    }

    /// Per-stage block specs with strides and STRF placement resolved.
    pub fn block_specs(&self) -> Vec<Vec<BlockSpec>> {
        let mut in_width = self.stem_width;
        self.stages
            .iter()
            .enumerate()
            .map(|(i, st)| {
                (0..st.blocks)
                    .map(|b| {
                        let spec = BlockSpec {
                            variant: st.variant,
                            in_width,
                            out_width: st.width,
                            spatial_stride: if b == 0 { STAGE_STRIDES[i] } else { 1 },
                            strf: st.strf.then_some(self.strf),
                        };
                        in_width = st.width;
                        spec
                    })
                    .collect()
            })
            .collect()
    }

    /// Copy of this spec with STRF removed everywhere.
    pub fn without_strf(&self) -> Self {
        let mut s = self.clone();
        s.stages.iter_mut().for_each(|st| st.strf = false);
        s
    }
}
