//! Bottom-up pattern matching: patch-wise cosine similarity between reference and
//! query features, max pooling over each side, and the mask detector that turns best
//! scores into soft match masks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, ConvVars};
use crate::tensor::{Padding, ReduceKind, Tape, Tensor, Var};

/// Zero-fiber guard for the cosine denominators.
pub const NORM_EPSILON: f64 = 1e-12;

/// Branch kernel sizes of the mask detector.
pub const BRANCH_KERNELS: [usize; 3] = [1, 3, 5];
/// Filters per branch.
pub const BRANCH_FILTERS: usize = 4;
/// Initial slope of the mask logit with respect to a uniform change of the score map.
pub const INIT_GAIN: f64 = 15.0;
/// Best score at which the initial mask is one half.
pub const INIT_CENTER: f64 = 0.8;

/// `S[x, y, i, j] = <F_R[x, y], F_Q[i, j]> / (|F_R[x, y]| |F_Q[i, j]|)`, computed by
/// normalising both sides and contracting over depth.
pub fn pairwise_cosine(tape: &mut Tape, reference: Var, query: Var) -> Result<Var> {
    let (sr, sq) = (tape.shape(reference), tape.shape(query));
    if sr.len() != 3 || sq.len() != 3 {
        return Err(Error::invalid(format!(
            "pairwise_cosine expects HxWxC features, got {sr:?} and {sq:?}"
        )));
    }
    if sr[2] != sq[2] {
        return Err(Error::invalid(format!(
            "feature depth mismatch: reference {} vs query {}",
            sr[2], sq[2]
        )));
    }
    let r = tape.l2_normalize(reference, NORM_EPSILON)?;
    let q = tape.l2_normalize(query, NORM_EPSILON)?;
    tape.pairwise_dot(r, q)
}

/// Best score of every reference patch over all query patches (`B_R`, `Hr x Wr x 1`)
/// and of every query patch over all reference patches (`B_Q`, `Hq x Wq x 1`).
pub fn global_max_pool(tape: &mut Tape, similarity: Var) -> Result<(Var, Var)> {
    let s = tape.shape(similarity).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid(format!(
            "similarity tensor must be 4-D, got {s:?}"
        )));
    }
    let br = tape.reduce(similarity, &[2, 3], ReduceKind::Max)?;
    let br = tape.reshape(br, &[s[0], s[1], 1])?;
    let bq = tape.reduce(similarity, &[0, 1], ReduceKind::Max)?;
    let bq = tape.reshape(bq, &[s[2], s[3], 1])?;
    Ok((br, bq))
}

/// Three parallel convolutions (kernels 1, 3, 5; four filters each) over a best-score
/// map, concatenated and fused to one channel by a 1x1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskDetectorWeights {
    pub branches: [ConvLayer; 3],
    pub fuse: ConvLayer,
}

#[derive(Clone, Debug)]
pub struct MaskDetectorVars {
    branches: [ConvVars; 3],
    fuse: ConvVars,
}

impl MaskDetectorWeights {
    /// Each branch kernel starts as a non-negative centre tap, so the initial mask is a
    /// sharp, rising function of the best score at the same cell; the zero side taps
    /// learn any spatial context. The fusion layer is scaled to a gain of [`INIT_GAIN`]
    /// and its bias puts the logit of a uniform [`INIT_CENTER`] map at zero. With signed
    /// random kernels the detector starts uncorrelated with the score and training from
    /// scratch tends to settle on the class prior.
    pub fn init(rng: &mut impl Rng) -> Self {
        let mut branches = BRANCH_KERNELS.map(|k| ConvLayer::init(k, 1, BRANCH_FILTERS, rng));
        let mut fuse = ConvLayer::init(1, BRANCH_FILTERS * BRANCH_KERNELS.len(), 1, rng);
        for (layer, k) in branches.iter_mut().zip(BRANCH_KERNELS) {
            let centre = (k / 2) * k + k / 2;
            for (i, w) in layer.kernel.data_mut().iter_mut().enumerate() {
                *w = if i / BRANCH_FILTERS == centre {
                    w.abs()
                } else {
                    0.0
                };
            }
        }
        for w in fuse.kernel.data_mut() {
            *w = w.abs();
        }
        let gain = Self::unit_response(&branches, &fuse);
        for w in fuse.kernel.data_mut() {
            *w *= INIT_GAIN / gain;
        }
        fuse.bias.data_mut()[0] = -INIT_GAIN * INIT_CENTER;
        MaskDetectorWeights { branches, fuse }
    }

    /// Fused pre-sigmoid response to an all-ones map, away from the borders, without
    /// the fusion bias.
    fn unit_response(branches: &[ConvLayer; 3], fuse: &ConvLayer) -> f64 {
        let mut channel_sums = Vec::with_capacity(BRANCH_FILTERS * BRANCH_KERNELS.len());
        for b in branches {
            let k = b.kernel.data();
            for f in 0..BRANCH_FILTERS {
                let s: f64 = k.iter().skip(f).step_by(BRANCH_FILTERS).sum();
                channel_sums.push(s + b.bias.data()[f]);
            }
        }
        channel_sums
            .iter()
            .zip(fuse.kernel.data())
            .map(|(s, w)| s * w)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (layer, k) in self.branches.iter().zip(BRANCH_KERNELS) {
            if layer.kernel.shape() != [k, k, 1, BRANCH_FILTERS] {
                return Err(Error::invalid(format!(
                    "mask branch with kernel {k} has shape {:?}",
                    layer.kernel.shape()
                )));
            }
        }
        if self.fuse.kernel.shape() != [1, 1, BRANCH_FILTERS * BRANCH_KERNELS.len(), 1] {
            return Err(Error::invalid(format!(
                "mask fusion kernel has shape {:?}",
                self.fuse.kernel.shape()
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> MaskDetectorVars {
        MaskDetectorVars {
            branches: [
                self.branches[0].bind(tape),
                self.branches[1].bind(tape),
                self.branches[2].bind(tape),
            ],
            fuse: self.fuse.bind(tape),
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (layer, k) in self.branches.iter_mut().zip(BRANCH_KERNELS) {
            layer.params_mut(&format!("mask.branch{k}"), out);
        }
        self.fuse.params_mut("mask.fuse", out);
    }

    pub fn params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (layer, k) in self.branches.iter().zip(BRANCH_KERNELS) {
            layer.params(&format!("mask.branch{k}"), out);
        }
        self.fuse.params("mask.fuse", out);
    }
}

impl MaskDetectorVars {
    pub(crate) fn push_vars(&self, out: &mut Vec<Var>) {
        for b in &self.branches {
            b.push_vars(out);
        }
        self.fuse.push_vars(out);
    }

    /// Soft mask with the same spatial extents as `best`. With `pano_wrap`, the
    /// convolutions wrap horizontally, as a panorama's left and right edges meet.
    pub fn detect(&self, tape: &mut Tape, best: Var, pano_wrap: bool) -> Result<Var> {
        let padding = if pano_wrap {
            Padding::SameCircularHorizontal
        } else {
            Padding::SameZero
        };
        let mut outs = Vec::with_capacity(3);
        for b in &self.branches {
            outs.push(b.apply(tape, best, padding, 1)?);
        }
        let stacked = tape.concat(&outs)?;
        let fused = self.fuse.apply(tape, stacked, padding, 1)?;
        Ok(tape.sigmoid(fused))
    }
}

/// Everything one match produces, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct MatchVars {
    pub similarity: Var,
    pub best_reference: Var,
    pub best_query: Var,
    pub mask_reference: Var,
    pub mask_query: Var,
}

/// Similarity, pooling and mask detection for one (reference, query) feature pair.
/// The reference mask uses wrap-around padding; the query mask does not.
pub fn match_features(
    tape: &mut Tape,
    reference: Var,
    query: Var,
    detector: &MaskDetectorVars,
) -> Result<MatchVars> {
    let similarity = pairwise_cosine(tape, reference, query)?;
    let (best_reference, best_query) = global_max_pool(tape, similarity)?;
    let mask_reference = detector.detect(tape, best_reference, true)?;
    let mask_query = detector.detect(tape, best_query, false)?;
    Ok(MatchVars {
        similarity,
        best_reference,
        best_query,
        mask_reference,
        mask_query,
    })
}

/// A soft `H x W x 1` mask with values in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(pub Tensor);

impl Mask {
    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn mean(&self) -> f64 {
        self.0.data().iter().sum::<f64>() / self.0.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cosine(r: Tensor, q: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let (r, q) = (tape.constant(r), tape.constant(q));
        let s = pairwise_cosine(&mut tape, r, q).unwrap();
        tape.value(s).clone()
    }

    #[test]
    fn cosine_hand_values() {
        let r = Tensor::new(vec![1, 3, 2], vec![3.0, 4.0, 1.0, 0.0, 2.0, -1.0]).unwrap();
        let q = Tensor::new(vec![1, 2, 2], vec![4.0, 3.0, 0.0, 5.0]).unwrap();
        let s = cosine(r, q);
        assert_eq!(s.shape(), &[1, 3, 1, 2]);
        assert!((s.get(&[0, 0, 0, 0]) - 0.96).abs() < 1e-15);
        assert_eq!(s.get(&[0, 1, 0, 1]), 0.0);
        let self_sim = cosine(
            Tensor::new(vec![1, 1, 2], vec![2.0, -7.0]).unwrap(),
            Tensor::new(vec![1, 1, 2], vec![2.0, -7.0]).unwrap(),
        );
        assert!((self_sim.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_fibers_give_zero_similarity() {
        let s = cosine(Tensor::zeros(&[2, 2, 3]), Tensor::full(&[1, 1, 3], 1.0));
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::zeros(&[2, 2, 3]));
        let q = tape.constant(Tensor::zeros(&[2, 2, 4]));
        assert!(matches!(
            pairwise_cosine(&mut tape, r, q),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn singleton_query_pool_is_squeeze() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::from_fn(&[3, 4, 1, 1], |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let (br, bq) = global_max_pool(&mut tape, sv).unwrap();
        assert_eq!(tape.shape(br), &[3, 4, 1]);
        assert_eq!(tape.value(br).data(), s.data());
        let max = s.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(tape.value(bq).data(), &[max]);
    }

    #[test]
    fn mask_keeps_spatial_size_and_range() {
        let det = MaskDetectorWeights::init(&mut ChaCha8Rng::seed_from_u64(4));
        det.validate().unwrap();
        for (h, w) in [(1, 1), (2, 7), (5, 3), (8, 32)] {
            let mut rng = ChaCha8Rng::seed_from_u64((h * 100 + w) as u64);
            let b = Tensor::from_fn(&[h, w, 1], |_| rng.gen_range(-1.0..1.0));
            for wrap in [false, true] {
                let mut tape = Tape::new();
                let vars = det.bind(&mut tape);
                let bv = tape.constant(b.clone());
                let m = vars.detect(&mut tape, bv, wrap).unwrap();
                assert_eq!(tape.shape(m), &[h, w, 1]);
                assert!(tape.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn wrapped_mask_is_rotation_equivariant() {
        let det = MaskDetectorWeights::init(&mut ChaCha8Rng::seed_from_u64(8));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (4, 9);
        let b = Tensor::from_fn(&[h, w, 1], |_| rng.gen_range(-1.0..1.0));
        let rotate = |t: &Tensor, k: usize| {
            Tensor::from_fn(&[h, w, 1], |i| {
                let (r, c) = (i / w, i % w);
                t.data()[r * w + (c + w - k) % w]
            })
        };
        let run = |input: Tensor| {
            let mut tape = Tape::new();
            let vars = det.bind(&mut tape);
            let bv = tape.constant(input);
            let m = vars.detect(&mut tape, bv, true).unwrap();
            tape.value(m).clone()
        };
        let base = run(b.clone());
        for k in 1..w {
            let rotated = run(rotate(&b, k));
            assert!(rotated.max_abs_diff(&rotate(&base, k)) < 1e-14, "shift {k}");
        }
    }
}
