//! Convolution-only feature trunk: every stage halves the spatial extents, so an
//! `H x W x 3` image becomes an `H/d x W/d x C` grid of patch features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, ConvVars};
use crate::tensor::{Padding, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of each stage. The stage count fixes the downsampling factor.
    pub channels_per_stage: Vec<usize>,
    pub input_channels: usize,
}

impl Default for BackboneConfig {
    /// The small trainable trunk: three stages (d = 8), channels 16, 32, 32.
    fn default() -> Self {
        BackboneConfig {
            channels_per_stage: vec![16, 32, 32],
            input_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn new(channels_per_stage: Vec<usize>) -> Result<Self> {
        let cfg = BackboneConfig {
            channels_per_stage,
            input_channels: 3,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_per_stage.is_empty() {
            return Err(Error::invalid("backbone needs at least one stage"));
        }
        if self.channels_per_stage.len() > 16 {
            return Err(Error::invalid("backbone supports at most 16 stages"));
        }
        if self.channels_per_stage.contains(&0) || self.input_channels == 0 {
            return Err(Error::invalid("backbone channel counts must be positive"));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.channels_per_stage.len()
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.num_stages()
    }

    pub fn feature_depth(&self) -> usize {
        *self.channels_per_stage.last().expect("validated non-empty")
    }

    /// Checks that an image of `height x width` can go through the trunk.
    pub fn check_extents(&self, height: usize, width: usize) -> Result<()> {
        let d = self.downsample_factor();
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::invalid(format!(
                "image extents {height}x{width} must be positive multiples of {d}"
            )));
        }
        Ok(())
    }
}

/// One stage: 3x3 conv, ReLU, then a stride-2 3x3 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub conv: ConvLayer,
    pub down: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub stages: Vec<Stage>,
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    stages: Vec<(ConvVars, ConvVars)>,
}

impl BackboneWeights {
    pub fn init(config: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut cin = config.input_channels;
        let stages = config
            .channels_per_stage
            .iter()
            .map(|&c| {
                let stage = Stage {
                    conv: ConvLayer::init(3, cin, c, rng),
                    down: ConvLayer::init(3, c, c, rng),
                };
                cin = c;
                stage
            })
            .collect();
        BackboneWeights { stages }
    }

    pub fn config(&self) -> BackboneConfig {
        BackboneConfig {
            channels_per_stage: self.stages.iter().map(|s| s.conv.out_channels()).collect(),
            input_channels: self.stages[0].conv.in_channels(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BackboneVars {
        BackboneVars {
            stages: self
                .stages
                .iter()
                .map(|s| (s.conv.bind(tape), s.down.bind(tape)))
                .collect(),
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.conv.params_mut(&format!("backbone.stage{i}.conv"), out);
            s.down.params_mut(&format!("backbone.stage{i}.down"), out);
        }
    }

    pub fn params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.conv.params(&format!("backbone.stage{i}.conv"), out);
            s.down.params(&format!("backbone.stage{i}.down"), out);
        }
    }

    pub fn parameter_count(&self) -> usize {
        let mut ps = Vec::new();
        self.params(&mut ps);
        ps.iter().map(|(_, t)| t.len()).sum()
    }
}

impl BackboneVars {
    pub(crate) fn push_vars(&self, out: &mut Vec<Var>) {
        for (conv, down) in &self.stages {
            conv.push_vars(out);
            down.push_vars(out);
        }
    }

    /// Runs the trunk on an `H x W x Cin` image. Stage outputs pass through ReLU
    /// except the last, so the patch features are signed.
    pub fn extract_features(&self, tape: &mut Tape, image: Var, padding: Padding) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid(format!(
                "backbone expects an HxWxC image, got shape {shape:?}"
            )));
        }
        let d = 1 << self.stages.len();
        if !shape[0].is_multiple_of(d) || !shape[1].is_multiple_of(d) {
            return Err(Error::invalid(format!(
                "image extents {}x{} must be multiples of {d}",
                shape[0], shape[1]
            )));
        }
        let shift = tape.constant(Tensor::full(&shape, -1.0));
        let scaled = tape.scale(image, 2.0);
        let mut x = tape.add(scaled, shift)?;
        let last = self.stages.len() - 1;
        for (i, (conv, down)) in self.stages.iter().enumerate() {
            x = conv.apply(tape, x, padding, 1)?;
            x = tape.relu(x);
            x = down.apply(tape, x, padding, 2)?;
            if i != last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}
