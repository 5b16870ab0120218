//! The trainable parameter set and the composed forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, BackboneVars, BackboneWeights};
use crate::error::{Error, Result};
use crate::matcher::{match_features, MaskDetectorVars, MaskDetectorWeights, MatchVars};
use crate::tensor::{Gradients, Padding, Tape, Tensor, Var};
use crate::verify::{build_feature, VerifierVars, VerifierWeights};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
}

impl ModelConfig {
    /// SHA-256 over the canonical JSON encoding; stored in checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

/// Weight groups that can be frozen independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Backbone,
    Mask,
    Verifier,
}

impl Group {
    pub fn of(param_name: &str) -> Group {
        if param_name.starts_with("backbone.") {
            Group::Backbone
        } else if param_name.starts_with("mask.") {
            Group::Mask
        } else {
            Group::Verifier
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: BackboneWeights,
    pub mask: MaskDetectorWeights,
    pub verifier: VerifierWeights,
}

/// Tape handles of every parameter for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub backbone: BackboneVars,
    pub mask: MaskDetectorVars,
    pub verifier: VerifierVars,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub matched: MatchVars,
    pub feature: Var,
    pub score: Var,
}

impl Model {
    /// Seeded initialisation. Parameters start without gradient accumulators.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.backbone.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = BackboneWeights::init(&config.backbone, &mut rng);
        let mask = MaskDetectorWeights::init(&mut rng);
        let verifier = VerifierWeights::init(&mut rng);
        Ok(Model {
            config,
            backbone,
            mask,
            verifier,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.backbone.validate()?;
        if self.backbone.config() != self.config.backbone {
            return Err(Error::invalid(
                "backbone weights do not match the configured stages",
            ));
        }
        self.mask.validate()?;
        self.verifier.validate()
    }

    pub fn downsample_factor(&self) -> usize {
        self.config.backbone.downsample_factor()
    }

    /// All parameters in a fixed order: backbone, mask detector, verifier.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.backbone.params(&mut out);
        self.mask.params(&mut out);
        self.verifier.params(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.backbone.params_mut(&mut out);
        self.mask.params_mut(&mut out);
        self.verifier.params_mut(&mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Turns gradient tracking on for `groups` and off for everything else.
    pub fn set_trainable(&mut self, groups: &[Group]) {
        for (name, p) in self.params_mut() {
            p.set_requires_grad(groups.contains(&Group::of(&name)));
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            backbone: self.backbone.bind(tape),
            mask: self.mask.bind(tape),
            verifier: self.verifier.bind(tape),
        }
    }

    /// Adds the gradients of one backward pass into the parameter accumulators.
    pub fn accumulate(&mut self, bound: &BoundModel, grads: &Gradients) -> Result<()> {
        let vars = bound.vars();
        for (var, (_, p)) in vars.into_iter().zip(self.params_mut()) {
            if let Some(g) = grads.get(var) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

impl BoundModel {
    /// Parameter handles in the order of [`Model::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.backbone.push_vars(&mut out);
        self.mask.push_vars(&mut out);
        self.verifier.push_vars(&mut out);
        out
    }

    pub fn features(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        self.backbone
            .extract_features(tape, image, Padding::SameZero)
    }

    /// Matching and verification from precomputed feature maps.
    pub fn head(&self, tape: &mut Tape, reference: Var, query: Var) -> Result<ForwardVars> {
        let matched = match_features(tape, reference, query, &self.mask)?;
        let feature = build_feature(tape, matched.mask_reference, matched.mask_query)?;
        let score = self.verifier.decide(tape, feature)?;
        Ok(ForwardVars {
            matched,
            feature,
            score,
        })
    }

    pub fn forward(&self, tape: &mut Tape, reference: Var, query: Var) -> Result<ForwardVars> {
        let fr = self.features(tape, reference)?;
        let fq = self.features(tape, query)?;
        self.head(tape, fr, fq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_is_small_and_ordered() {
        let m = Model::init(ModelConfig::default(), 1).unwrap();
        m.validate().unwrap();
        assert!(m.parameter_count() < 100_000);
        let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "backbone.stage0.conv.kernel");
        assert_eq!(names.last().unwrap(), "verifier.dense2.bias");
        let mut tape = Tape::new();
        assert_eq!(m.bind(&mut tape).vars().len(), names.len());
    }

    #[test]
    fn groups_follow_name_prefixes() {
        let mut m = Model::init(ModelConfig::default(), 1).unwrap();
        m.set_trainable(&[Group::Verifier]);
        for (name, p) in m.params() {
            assert_eq!(p.requires_grad(), name.starts_with("verifier."), "{name}");
        }
    }

    #[test]
    fn digest_tracks_config() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            backbone: BackboneConfig::new(vec![8, 8]).unwrap(),
        };
        assert_eq!(a.digest(), ModelConfig::default().digest());
        assert_ne!(a.digest(), b.digest());
    }
}
