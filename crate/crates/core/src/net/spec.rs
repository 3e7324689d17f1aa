use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// conv3×3 → BN → ReLU
    PlainConv,
    /// Two conv3×3/BN pairs with an identity shortcut; down-sampling blocks
    /// use a subsampled, zero-channel-padded shortcut.
    ResidualBasic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub block: BlockKind,
    pub blocks: usize,
    pub channels: usize,
    /// The first block of the stage halves the spatial resolution.
    pub downsample: bool,
}

/// Declarative backbone: stem, ordered stages, and a global-average-pool +
/// fully-connected classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    pub in_channels: usize,
    /// Height and width of (square) inputs.
    #[serde(default = "default_input_side")]
    pub input_side: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub classes: usize,
}

fn default_input_side() -> usize {
    32
}

impl BackboneSpec {
    /// Stem 3×3×16, one residual block per stage at widths 16/32/64, stages 2
    /// and 3 down-sample. About 0.08M parameters for 10 classes.
    pub fn tiny_res8(in_channels: usize, classes: usize) -> Self {
        Self::tiny_res("tinyres8", in_channels, classes, 1, [16, 32, 64])
    }

    /// Two residual blocks per stage at widths 32/64/128. About 0.7M
    /// parameters for 10 classes.
    pub fn tiny_res14(in_channels: usize, classes: usize) -> Self {
        Self::tiny_res("tinyres14", in_channels, classes, 2, [32, 64, 128])
    }

    fn tiny_res(
        name: &str,
        in_channels: usize,
        classes: usize,
        blocks: usize,
        widths: [usize; 3],
    ) -> Self {
        BackboneSpec {
            name: name.to_string(),
            in_channels,
            input_side: 32,
            stem_channels: widths[0],
            stages: widths
                .iter()
                .enumerate()
                .map(|(i, &channels)| StageSpec {
                    block: BlockKind::ResidualBasic,
                    blocks,
                    channels,
                    downsample: i > 0,
                })
                .collect(),
            classes,
        }
    }

    pub fn with_input_side(mut self, side: usize) -> Self {
        self.input_side = side;
        self
    }

    /// Looks up a named preset.
    pub fn preset(name: &str, in_channels: usize, classes: usize) -> Option<Self> {
        match name {
            "tinyres8" => Some(Self::tiny_res8(in_channels, classes)),
            "tinyres14" => Some(Self::tiny_res14(in_channels, classes)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.stages.is_empty() {
            problems.push("at least one stage is required".to_string());
        }
        if !self.stages.iter().any(|s| s.downsample) {
            problems.push("at least one stage must down-sample".to_string());
        }
        if self.in_channels == 0 || self.stem_channels == 0 {
            problems.push("input and stem channels must be positive".to_string());
        }
        if self.input_side == 0 {
            problems.push("input side must be positive".to_string());
        }
        if self.classes < 2 {
            problems.push(format!("need at least 2 classes, got {}", self.classes));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 {
                problems.push(format!("stage {} has zero channels", i + 1));
            }
            if s.blocks == 0 {
                problems.push(format!("stage {} has zero blocks", i + 1));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(problems.join("; ")))
        }
    }

    pub fn downsample_count(&self) -> usize {
        self.stages.iter().filter(|s| s.downsample).count()
    }

    /// Valid auxiliary-classifier locations.
    ///
    /// Location `k` is the output of stage `k` (`0` is the stem). It is a
    /// candidate when stage `k + 1` begins with a down-sampling layer, so a
    /// head attached there rebuilds every remaining down-sampling layer.
    pub fn attachment_points(&self) -> Vec<usize> {
        self.stages
            .iter()
            .enumerate()
            .filter(|(_, s)| s.downsample)
            .map(|(i, _)| i)
            .collect()
    }

    /// Spatial side of the feature map at a location (0 = stem).
    pub fn side_at(&self, location: usize) -> usize {
        let halvings = self.stages[..location].iter().filter(|s| s.downsample).count();
        (0..halvings).fold(self.input_side, |side, _| side.div_ceil(2))
    }

    /// Channels produced at a location (0 = stem).
    pub fn channels_at(&self, location: usize) -> usize {
        if location == 0 {
            self.stem_channels
        } else {
            self.stages[location - 1].channels
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadStyle {
    /// Remaining stages at twice the backbone width, half the block count.
    #[default]
    Default,
    /// Remaining stages at the backbone width (half of `Default`).
    Narrow,
    /// Average pooling to at most 4×4 and a fully-connected layer only.
    Apfc,
}

impl std::fmt::Display for HeadStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadStyle::Default => "default",
            HeadStyle::Narrow => "narrow",
            HeadStyle::Apfc => "apfc",
        })
    }
}

/// Resolved structure of one auxiliary classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub style: HeadStyle,
    pub location: usize,
    pub stages: Vec<StageSpec>,
}

impl HeadSpec {
    /// Head for `location`, rebuilding stages `location + 1 ..= S` with the
    /// backbone's block type and down-sampling flags.
    pub fn for_location(backbone: &BackboneSpec, location: usize, style: HeadStyle) -> Self {
        let stages = match style {
            HeadStyle::Apfc => Vec::new(),
            HeadStyle::Default | HeadStyle::Narrow => {
                let widen = if style == HeadStyle::Default { 2 } else { 1 };
                backbone.stages[location..]
                    .iter()
                    .map(|s| StageSpec {
                        block: s.block,
                        blocks: (s.blocks / 2).max(1),
                        channels: s.channels * widen,
                        downsample: s.downsample,
                    })
                    .collect()
            }
        };
        HeadSpec {
            style,
            location,
            stages,
        }
    }

    pub fn downsample_count(&self) -> usize {
        self.stages.iter().filter(|s| s.downsample).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tinyres8_attachment_points() {
        let spec = BackboneSpec::tiny_res8(3, 10);
        spec.validate().unwrap();
        assert_eq!(spec.attachment_points(), vec![1, 2]);
        assert_eq!(spec.downsample_count(), 2);
    }

    #[test]
    fn all_downsampling_spec_has_three_points() {
        let mut spec = BackboneSpec::tiny_res8(3, 10);
        spec.stages.iter_mut().for_each(|s| s.downsample = true);
        assert_eq!(spec.attachment_points(), vec![0, 1, 2]);
    }

    #[test]
    fn invalid_spec_lists_violations() {
        let mut spec = BackboneSpec::tiny_res8(3, 10);
        spec.stages.iter_mut().for_each(|s| s.downsample = false);
        spec.stages[0].blocks = 0;
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("down-sample") && msg.contains("zero blocks"), "{msg}");
    }

    #[test]
    fn head_keeps_downsample_count() {
        let spec = BackboneSpec::tiny_res14(3, 10);
        for loc in spec.attachment_points() {
            for style in [HeadStyle::Default, HeadStyle::Narrow] {
                let head = HeadSpec::for_location(&spec, loc, style);
                let before: usize = spec.stages[..loc].iter().filter(|s| s.downsample).count();
                assert_eq!(before + head.downsample_count(), spec.downsample_count());
            }
        }
        let head = HeadSpec::for_location(&spec, 1, HeadStyle::Default);
        assert_eq!(head.stages[0].channels, 128);
        assert_eq!(head.stages[0].blocks, 1);
        let narrow = HeadSpec::for_location(&spec, 1, HeadStyle::Narrow);
        assert_eq!(narrow.stages[0].channels, 64);
    }
}
