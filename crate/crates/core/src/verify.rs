//! Soft patch-count verification: the means of both masks form a 2-vector that a
//! small 16-4-1 MLP turns into a match score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::matcher::Mask;
use crate::model::Model;
use crate::nn::{DenseLayer, DenseVars};
use crate::tensor::{Tape, Tensor, Var};

pub const HIDDEN_WIDTHS: [usize; 3] = [16, 4, 1];
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct VerifierWeights {
    pub layers: [DenseLayer; 3],
}

#[derive(Clone, Debug)]
pub struct VerifierVars {
    layers: [DenseVars; 3],
}

impl VerifierWeights {
    pub fn init(rng: &mut impl Rng) -> Self {
        VerifierWeights {
            layers: [
                DenseLayer::init(2, HIDDEN_WIDTHS[0], rng),
                DenseLayer::init(HIDDEN_WIDTHS[0], HIDDEN_WIDTHS[1], rng),
                DenseLayer::init(HIDDEN_WIDTHS[1], HIDDEN_WIDTHS[2], rng),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut inputs = 2;
        for (layer, &w) in self.layers.iter().zip(&HIDDEN_WIDTHS) {
            if layer.inputs() != inputs || layer.outputs() != w {
                return Err(Error::invalid(format!(
                    "verifier layer expected {inputs}x{w}, found {}x{}",
                    layer.inputs(),
                    layer.outputs()
                )));
            }
            inputs = w;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> VerifierVars {
        VerifierVars {
            layers: [
                self.layers[0].bind(tape),
                self.layers[1].bind(tape),
                self.layers[2].bind(tape),
            ],
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.params_mut(&format!("verifier.dense{i}"), out);
        }
    }

    pub fn params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&format!("verifier.dense{i}"), out);
        }
    }
}

impl VerifierVars {
    pub(crate) fn push_vars(&self, out: &mut Vec<Var>) {
        for l in &self.layers {
            l.push_vars(out);
        }
    }

    /// Score in (0, 1) from the 2-vector `[mean(M_R), mean(M_Q)]`.
    pub fn decide(&self, tape: &mut Tape, feature: Var) -> Result<Var> {
        let h = self.layers[0].apply(tape, feature)?;
        let h = tape.relu(h);
        let h = self.layers[1].apply(tape, h)?;
        let h = tape.relu(h);
        let logit = self.layers[2].apply(tape, h)?;
        let logit = tape.reshape(logit, &[])?;
        Ok(tape.sigmoid(logit))
    }
}

/// `V = [mean(M_R), mean(M_Q)]`, a soft count of matched patches on each side.
pub fn build_feature(tape: &mut Tape, mask_reference: Var, mask_query: Var) -> Result<Var> {
    let r = tape.mean_all(mask_reference);
    let q = tape.mean_all(mask_query);
    tape.concat(&[r, q])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub query_path: String,
    pub ref_path: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    pub score: f64,
    pub label: bool,
    pub feature: [f64; 2],
    pub mask_reference: Mask,
    pub mask_query: Mask,
}

/// Full forward pass for one pair. Both images must already be backbone-divisible.
pub fn verify(
    query: &Image,
    reference: &Image,
    model: &Model,
    threshold: f64,
) -> Result<Verification> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "threshold must be in [0, 1], got {threshold}"
        )));
    }
    let cfg = &model.config.backbone;
    cfg.check_extents(query.height(), query.width())?;
    cfg.check_extents(reference.height(), reference.width())?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let q = tape.constant(query.to_tensor());
    let r = tape.constant(reference.to_tensor());
    let out = bound.forward(&mut tape, r, q)?;
    let score = tape.value(out.score).item()?;
    let v = tape.value(out.feature).data();
    Ok(Verification {
        score,
        label: score >= threshold,
        feature: [v[0], v[1]],
        mask_reference: Mask(tape.value(out.matched.mask_reference).clone()),
        mask_query: Mask(tape.value(out.matched.mask_query).clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feature_of(mr: Tensor, mq: Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(mr), tape.constant(mq));
        let v = build_feature(&mut tape, a, b).unwrap();
        tape.value(v).data().to_vec()
    }

    #[test]
    fn feature_of_constant_masks() {
        assert_eq!(
            feature_of(Tensor::full(&[3, 5, 1], 1.0), Tensor::full(&[2, 2, 1], 1.0)),
            vec![1.0, 1.0]
        );
        assert_eq!(
            feature_of(Tensor::zeros(&[3, 5, 1]), Tensor::zeros(&[2, 2, 1])),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn quarter_filled_mask() {
        let mr = Tensor::from_fn(&[4, 4, 1], |i| if i % 4 == 1 { 1.0 } else { 0.0 });
        assert_eq!(feature_of(mr, Tensor::zeros(&[1, 1, 1]))[0], 0.25);
    }

    fn score(weights: &VerifierWeights, v: [f64; 2]) -> f64 {
        let mut tape = Tape::new();
        let vars = weights.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![2], v.to_vec()).unwrap());
        let s = vars.decide(&mut tape, x).unwrap();
        tape.value(s).item().unwrap()
    }

    #[test]
    fn zero_weights_score_one_half() {
        let mut w = VerifierWeights::init(&mut ChaCha8Rng::seed_from_u64(0));
        for (_, p) in {
            let mut ps = Vec::new();
            w.params_mut(&mut ps);
            ps
        } {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(score(&w, [0.3, 0.9]), 0.5);
        assert_eq!(score(&w, [0.0, 0.0]), 0.5);
    }

    #[test]
    fn decide_matches_hand_mlp() {
        let w = VerifierWeights::init(&mut ChaCha8Rng::seed_from_u64(11));
        w.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let v = [rng.gen::<f64>(), rng.gen::<f64>()];
            // Independent matvec chain over the raw weight arrays.
            let mut h = v.to_vec();
            for (li, layer) in w.layers.iter().enumerate() {
                let (n, m) = (layer.inputs(), layer.outputs());
                let mut out = vec![0.0; m];
                for j in 0..m {
                    let mut acc = layer.bias.data()[j];
                    for i in 0..n {
                        acc += h[i] * layer.weights.data()[i * m + j];
                    }
                    out[j] = if li < 2 { acc.max(0.0) } else { acc };
                }
                h = out;
            }
            let expected = 1.0 / (1.0 + (-h[0]).exp());
            let got = score(&w, v);
            assert!(
                (got - expected).abs() <= 1e-12 * expected.abs(),
                "{got} vs {expected}"
            );
            assert!(got > 0.0 && got < 1.0);
        }
    }

    #[test]
    fn malformed_widths_fail_validation() {
        let mut w = VerifierWeights::init(&mut ChaCha8Rng::seed_from_u64(0));
        w.layers[1] = DenseLayer::init(16, 5, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(w.validate().is_err());
    }
}
