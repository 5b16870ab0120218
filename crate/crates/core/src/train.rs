//! Two-phase training. Phase 1 supervises the reference mask on synthetic positives
//! (SGD). Phase 2 trains verification with class-balanced batches: first the MLP
//! alone on frozen features (2a), then everything end to end (2b), both with Adam.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::localize::{BoundingBox, Grid};
use crate::matcher::match_features;
use crate::model::{BoundModel, Group, Model};
use crate::synth::{make_negatives, SynthDataset, DEFAULT_COVERAGE};
use crate::tensor::{Adam, AdamState, Optimizer, Sgd, Tape, Tensor, Var};

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the log-loss.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2a")]
    TwoA,
    #[serde(rename = "2b")]
    TwoB,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::One => "1",
            Phase::TwoA => "2a",
            Phase::TwoB => "2b",
        }
    }

    pub fn parse(s: &str) -> Result<Phase> {
        match s {
            "1" => Ok(Phase::One),
            "2a" => Ok(Phase::TwoA),
            "2b" => Ok(Phase::TwoB),
            _ => Err(Error::invalid(format!("unknown phase {s:?}"))),
        }
    }

    fn salt(self) -> u64 {
        match self {
            Phase::One => 1,
            Phase::TwoA => 2,
            Phase::TwoB => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement of `min_delta`.
    pub patience: usize,
    pub min_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase1: PhaseConfig,
    pub phase2a: PhaseConfig,
    pub phase2b: PhaseConfig,
    /// Every batch resizes its queries to one of these square sizes.
    pub query_sizes: Vec<usize>,
    pub mask_coverage: f64,
    /// Phase-1 batches hold runs of this many queries from one panorama, so the
    /// panorama's features are computed once per run. 1 gives fully shuffled batches.
    pub panorama_run: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Published hyperparameters, with a generous epoch cap standing in for
    /// "until convergence".
    pub fn published() -> TrainConfig {
        let phase = |optimizer, lr, batch| PhaseConfig {
            optimizer,
            learning_rate: lr,
            batch_size: batch,
            max_epochs: 100,
            patience: 5,
            min_delta: 1e-4,
        };
        TrainConfig {
            phase1: phase(OptimizerKind::Sgd, 1e-2, 16),
            phase2a: phase(OptimizerKind::Adam, 1e-3, 64),
            phase2b: phase(OptimizerKind::Adam, 1e-5, 64),
            query_sizes: vec![192, 224, 256],
            mask_coverage: DEFAULT_COVERAGE,
            panorama_run: 1,
            seed: 0,
        }
    }

    /// Same rates as [`TrainConfig::published`]. Phase 1 keeps its cap and stops on
    /// convergence. Phase 2 gets desk epoch caps and a batch of 16. Query sizes give
    /// the same 6, 7 and 8 cell feature grids under the d = 8 backbone as the published
    /// sizes give under d = 32.
    pub fn desk() -> TrainConfig {
        let mut cfg = TrainConfig::published();
        cfg.phase2a.batch_size = 16;
        cfg.phase2a.max_epochs = 60;
        cfg.phase2b.batch_size = 16;
        cfg.phase2b.max_epochs = 2;
        cfg.query_sizes = vec![48, 56, 64];
        cfg.panorama_run = 4;
        cfg
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        for (name, p) in [
            ("1", &self.phase1),
            ("2a", &self.phase2a),
            ("2b", &self.phase2b),
        ] {
            if p.batch_size == 0 || !(p.learning_rate >= 0.0) || !p.learning_rate.is_finite() {
                return Err(Error::invalid(format!(
                    "phase {name} needs a positive batch size and a non-negative learning rate"
                )));
            }
        }
        for p in [&self.phase2a, &self.phase2b] {
            if p.batch_size < 4 || p.batch_size % 2 != 0 {
                return Err(Error::invalid(
                    "phase 2 batches must be even and hold at least two positives",
                ));
            }
        }
        if self.query_sizes.is_empty() || self.query_sizes.iter().any(|&s| s == 0 || s % d != 0) {
            return Err(Error::invalid(format!(
                "query sizes {:?} must be positive multiples of {d}",
                self.query_sizes
            )));
        }
        if self.panorama_run == 0 {
            return Err(Error::invalid("panorama_run must be at least 1"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Where a phase stands; stored in checkpoints so training can resume.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseProgress {
    pub epochs: usize,
    pub best_val: f64,
    pub stale: usize,
    pub converged: bool,
    pub adam: Option<AdamState>,
}

impl Default for PhaseProgress {
    fn default() -> Self {
        PhaseProgress {
            epochs: 0,
            best_val: f64::INFINITY,
            stale: 0,
            converged: false,
            adam: None,
        }
    }
}

impl PhaseProgress {
    fn record(&mut self, val_loss: f64, cfg: &PhaseConfig) {
        self.epochs += 1;
        if val_loss < self.best_val - cfg.min_delta {
            self.best_val = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= cfg.patience {
                self.converged = true;
            }
        }
    }

    pub fn finished(&self, cfg: &PhaseConfig) -> bool {
        self.converged || self.epochs >= cfg.max_epochs
    }
}

/// A positive: a query seen in panorama `pano`, with its source box if synthetic.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub query: Image,
    pub pano: usize,
    pub source_box: Option<BoundingBox>,
}

#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub panoramas: Vec<Image>,
    pub samples: Vec<TrainSample>,
}

impl PairSet {
    /// The records at `indices`, sharing all of the dataset's panoramas.
    pub fn from_synth(
        data: &SynthDataset,
        indices: impl IntoIterator<Item = usize>,
    ) -> Result<PairSet> {
        let samples = indices
            .into_iter()
            .map(|i| {
                let r = &data.records[i];
                let query = r.query.clone().ok_or_else(|| {
                    Error::invalid(format!("synthetic record {i} has no query image"))
                })?;
                Ok(TrainSample {
                    query,
                    pano: r.pano_id,
                    source_box: Some(r.source_box),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PairSet {
            panoramas: data.panoramas.clone(),
            samples,
        })
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        for p in &self.panoramas {
            if p.height() % d != 0 || p.width() % d != 0 {
                return Err(Error::invalid(format!(
                    "panorama {}x{} is not a multiple of {d}",
                    p.height(),
                    p.width()
                )));
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.pano >= self.panoramas.len() {
                return Err(Error::invalid(format!(
                    "sample {i} refers to a missing panorama"
                )));
            }
        }
        Ok(())
    }

    pub fn target(&self, i: usize, d: usize, coverage: f64) -> Result<Grid> {
        let s = &self.samples[i];
        let b = s
            .source_box
            .ok_or_else(|| Error::invalid(format!("sample {i} has no source box for phase 1")))?;
        let p = &self.panoramas[s.pano];
        crate::synth::mask_target(&b, p.height(), p.width(), d, coverage)
    }
}

fn grid_tensor(g: &Grid) -> Tensor {
    Tensor::new(
        vec![g.height, g.width, 1],
        g.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect(),
    )
    .expect("grid extents are positive")
}

/// Mean cell-wise log-loss of a predicted reference mask against a binary target.
pub fn loss_mask(tape: &mut Tape, predicted: Var, target: &Grid) -> Result<Var> {
    tape.binary_cross_entropy(predicted, &grid_tensor(target), BCE_CLAMP)
}

/// Log-loss of one verification score.
pub fn loss_verify(tape: &mut Tape, score: Var, label: bool) -> Result<Var> {
    let t = Tensor::scalar(if label { 1.0 } else { 0.0 });
    tape.binary_cross_entropy(score, &t, BCE_CLAMP)
}

fn epoch_rng(seed: u64, phase: Phase, epoch: usize) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(phase.salt() << 32)
        .wrapping_add(epoch as u64);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn check_finite(loss: f64, phase: Phase, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            phase: phase.as_str().to_string(),
            epoch,
            step,
            loss,
        })
    }
}

/// Applies and clears the accumulated gradients. A zero learning rate leaves the
/// parameters untouched.
fn apply_update(model: &mut Model, opt: Option<&mut dyn Optimizer>) -> Result<()> {
    let mut params = model.params_mut();
    if let Some(opt) = opt {
        opt.step(&mut params)?;
    }
    for (_, p) in params.iter_mut() {
        p.zero_grad();
    }
    Ok(())
}

enum PhaseOptimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl PhaseOptimizer {
    /// `None` for a zero learning rate, which skips updates altogether.
    fn new(cfg: &PhaseConfig, state: Option<AdamState>) -> Result<Option<PhaseOptimizer>> {
        if cfg.learning_rate == 0.0 {
            return Ok(None);
        }
        Ok(Some(match cfg.optimizer {
            OptimizerKind::Sgd => PhaseOptimizer::Sgd(Sgd::new(cfg.learning_rate)?),
            OptimizerKind::Adam => {
                let opt = Adam::new(cfg.learning_rate)?;
                PhaseOptimizer::Adam(match state {
                    Some(s) => opt.with_state(s),
                    None => opt,
                })
            }
        }))
    }

    fn as_dyn(&mut self) -> &mut dyn Optimizer {
        match self {
            PhaseOptimizer::Sgd(o) => o,
            PhaseOptimizer::Adam(o) => o,
        }
    }

    fn adam_state(&self) -> Option<AdamState> {
        match self {
            PhaseOptimizer::Sgd(_) => None,
            PhaseOptimizer::Adam(o) => Some(o.state().clone()),
        }
    }
}

fn resized(img: &Image, size: usize, d: usize) -> Result<Image> {
    img.resize_for_backbone(size, size, d)
}

/// Runs the epoch loop of one phase, logging each epoch to `sink`.
fn run_phase(
    phase: Phase,
    cfg: &PhaseConfig,
    seed: u64,
    progress: &mut PhaseProgress,
    sink: &mut dyn FnMut(&LogEntry) -> Result<()>,
    mut epoch_fn: impl FnMut(usize, &mut ChaCha8Rng) -> Result<(f64, f64)>,
) -> Result<()> {
    while !progress.finished(cfg) {
        let epoch = progress.epochs + 1;
        let mut rng = epoch_rng(seed, phase, epoch);
        let (train_loss, val_loss) = epoch_fn(epoch, &mut rng)?;
        check_finite(val_loss, phase, epoch, 0)?;
        progress.record(val_loss, cfg);
        let entry = LogEntry {
            phase,
            epoch,
            train_loss,
            val_loss,
            lr: cfg.learning_rate,
        };
        log::info!(
            "phase {} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}",
            phase.as_str()
        );
        sink(&entry)?;
    }
    Ok(())
}

/// Phase-1 batch order: each panorama's samples shuffled and cut into runs, runs
/// shuffled globally.
fn phase1_order(data: &PairSet, run: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut by_pano: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.samples.iter().enumerate() {
        by_pano.entry(s.pano).or_default().push(i);
    }
    let mut runs = Vec::new();
    for (_, mut idx) in by_pano {
        idx.shuffle(rng);
        runs.extend(idx.chunks(run).map(<[usize]>::to_vec));
    }
    runs.shuffle(rng);
    runs.concat()
}

/// Mean mask loss over `indices` as one tape; panoramas are embedded once each.
fn phase1_batch(
    tape: &mut Tape,
    bound: &BoundModel,
    data: &PairSet,
    indices: &[usize],
    size: usize,
    d: usize,
    coverage: f64,
) -> Result<Var> {
    let mut pano_feats: BTreeMap<usize, Var> = BTreeMap::new();
    let mut losses = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &data.samples[i];
        let fr = match pano_feats.get(&s.pano) {
            Some(&v) => v,
            None => {
                let r = tape.constant(data.panoramas[s.pano].to_tensor());
                let v = bound.features(tape, r)?;
                pano_feats.insert(s.pano, v);
                v
            }
        };
        let q = tape.constant(resized(&s.query, size, d)?.to_tensor());
        let fq = bound.features(tape, q)?;
        let m = match_features(tape, fr, fq, &bound.mask)?;
        let target = data.target(i, d, coverage)?;
        losses.push(loss_mask(tape, m.mask_reference, &target)?);
    }
    tape.mean_of(&losses)
}

fn phase1_val(model: &Model, val: &PairSet, cfg: &TrainConfig) -> Result<f64> {
    let d = model.downsample_factor();
    if val.samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..val.samples.len() {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let size = cfg.query_sizes[i % cfg.query_sizes.len()];
        let loss = phase1_batch(&mut tape, &bound, val, &[i], size, d, cfg.mask_coverage)?;
        total += tape.value(loss).item()?;
    }
    Ok(total / val.samples.len() as f64)
}

/// Phase 1: backbone and mask detector on the reference-mask log-loss; the verifier
/// stays frozen.
pub fn train_phase1(
    model: &mut Model,
    train: &PairSet,
    val: &PairSet,
    cfg: &TrainConfig,
    progress: &mut PhaseProgress,
    sink: &mut dyn FnMut(&LogEntry) -> Result<()>,
) -> Result<()> {
    let d = model.downsample_factor();
    cfg.validate(d)?;
    train.validate(d)?;
    val.validate(d)?;
    if train.samples.is_empty() {
        return Err(Error::invalid("phase 1 needs at least one training sample"));
    }
    model.set_trainable(&[Group::Backbone, Group::Mask]);
    let pc = cfg.phase1.clone();
    let mut opt = PhaseOptimizer::new(&pc, progress.adam.take())?;
    let result = run_phase(Phase::One, &pc, cfg.seed, progress, sink, |epoch, rng| {
        let order = phase1_order(train, cfg.panorama_run, rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (step, batch) in order.chunks(pc.batch_size).enumerate() {
            let size = *cfg.query_sizes.choose(rng).expect("validated non-empty");
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let loss = phase1_batch(&mut tape, &bound, train, batch, size, d, cfg.mask_coverage)?;
            let value = tape.value(loss).item()?;
            check_finite(value, Phase::One, epoch, step)?;
            let grads = tape.backward(loss)?;
            model.accumulate(&bound, &grads)?;
            apply_update(model, opt.as_mut().map(PhaseOptimizer::as_dyn))?;
            sum += value;
            batches += 1;
        }
        Ok((sum / batches as f64, phase1_val(model, val, cfg)?))
    });
    progress.adam = opt.as_ref().and_then(PhaseOptimizer::adam_state);
    model.set_trainable(&[]);
    result
}

/// Positives and their negatives for one balanced batch: `(query, pano, label)`.
fn balanced_pairs(
    data: &PairSet,
    positives: &[usize],
    rng: &mut impl Rng,
) -> Vec<(usize, usize, bool)> {
    let keys: Vec<usize> = positives.iter().map(|&i| data.samples[i].pano).collect();
    let mut pairs: Vec<(usize, usize, bool)> = positives
        .iter()
        .map(|&i| (i, data.samples[i].pano, true))
        .collect();
    match make_negatives(&keys, rng) {
        Ok(perm) => {
            for (k, &i) in positives.iter().enumerate() {
                pairs.push((i, keys[perm[k]], false));
            }
        }
        Err(_) => {
            // Batch dominated by one panorama: draw other panoramas from the whole set.
            for &i in positives {
                let own = data.samples[i].pano;
                let mut p = rng.gen_range(0..data.panoramas.len());
                while p == own {
                    p = rng.gen_range(0..data.panoramas.len());
                }
                pairs.push((i, p, false));
            }
        }
    }
    pairs
}

/// Fixed validation pairs: every positive plus one derangement negative each.
fn validation_pairs(val: &PairSet, seed: u64) -> Vec<(usize, usize, bool)> {
    if val.samples.len() < 2 {
        return Vec::new();
    }
    let all: Vec<usize> = (0..val.samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    balanced_pairs(val, &all, &mut rng)
}

/// Frozen-feature cache for stage 2a.
struct FeatureCache {
    panoramas: Vec<Tensor>,
    /// `queries[size_index][sample]`
    queries: Vec<Vec<Tensor>>,
    verification: BTreeMap<(usize, usize, usize), [f64; 2]>,
}

impl FeatureCache {
    fn build(model: &Model, data: &PairSet, sizes: &[usize]) -> Result<FeatureCache> {
        let d = model.downsample_factor();
        let embed = |img: &Image| -> Result<Tensor> {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let x = tape.constant(img.to_tensor());
            let f = bound.features(&mut tape, x)?;
            Ok(tape.value(f).clone())
        };
        let panoramas = data
            .panoramas
            .iter()
            .map(embed)
            .collect::<Result<Vec<_>>>()?;
        let queries = sizes
            .iter()
            .map(|&s| {
                data.samples
                    .iter()
                    .map(|q| embed(&resized(&q.query, s, d)?))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureCache {
            panoramas,
            queries,
            verification: BTreeMap::new(),
        })
    }

    fn feature(
        &mut self,
        model: &Model,
        size_idx: usize,
        query: usize,
        pano: usize,
    ) -> Result<[f64; 2]> {
        if let Some(v) = self.verification.get(&(size_idx, query, pano)) {
            return Ok(*v);
        }
        let mut tape = Tape::new();
        let mask = model.mask.bind(&mut tape);
        let fr = tape.constant(self.panoramas[pano].clone());
        let fq = tape.constant(self.queries[size_idx][query].clone());
        let m = match_features(&mut tape, fr, fq, &mask)?;
        let f = crate::verify::build_feature(&mut tape, m.mask_reference, m.mask_query)?;
        let data = tape.value(f).data();
        let v = [data[0], data[1]];
        self.verification.insert((size_idx, query, pano), v);
        Ok(v)
    }
}

fn mlp_loss(
    tape: &mut Tape,
    model: &Model,
    features: &[([f64; 2], bool)],
) -> Result<(Var, crate::verify::VerifierVars)> {
    let vars = model.verifier.bind(tape);
    let mut losses = Vec::with_capacity(features.len());
    for &(v, label) in features {
        let x = tape.constant(Tensor::new(vec![2], v.to_vec())?);
        let s = vars.decide(tape, x)?;
        losses.push(loss_verify(tape, s, label)?);
    }
    Ok((tape.mean_of(&losses)?, vars))
}

/// Stage 2a: only the verifier MLP trains; backbone and mask detector are frozen, so
/// their outputs are computed once and cached.
pub fn train_phase2a(
    model: &mut Model,
    train: &PairSet,
    val: &PairSet,
    cfg: &TrainConfig,
    progress: &mut PhaseProgress,
    sink: &mut dyn FnMut(&LogEntry) -> Result<()>,
) -> Result<()> {
    let d = model.downsample_factor();
    cfg.validate(d)?;
    train.validate(d)?;
    val.validate(d)?;
    check_phase2_data(train)?;
    model.set_trainable(&[Group::Verifier]);
    let pc = cfg.phase2a.clone();
    let mut cache = FeatureCache::build(model, train, &cfg.query_sizes)?;
    let mut val_cache = FeatureCache::build(model, val, &cfg.query_sizes)?;
    let val_pairs = validation_pairs(val, cfg.seed);
    let mut opt = PhaseOptimizer::new(&pc, progress.adam.take())?;
    let n_sizes = cfg.query_sizes.len();
    let result = run_phase(Phase::TwoA, &pc, cfg.seed, progress, sink, |epoch, rng| {
        let mut order: Vec<usize> = (0..train.samples.len()).collect();
        order.shuffle(rng);
        let (mut sum, mut batches) = (0.0, 0);
        for (step, chunk) in order.chunks(pc.batch_size / 2).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let size_idx = rng.gen_range(0..n_sizes);
            let pairs = balanced_pairs(train, chunk, rng);
            let feats = pairs
                .iter()
                .map(|&(q, p, l)| Ok((cache.feature(model, size_idx, q, p)?, l)))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let (loss, vars) = mlp_loss(&mut tape, model, &feats)?;
            let value = tape.value(loss).item()?;
            check_finite(value, Phase::TwoA, epoch, step)?;
            let grads = tape.backward(loss)?;
            let mut handles = Vec::new();
            vars.push_vars(&mut handles);
            let mut params = Vec::new();
            model.verifier.params_mut(&mut params);
            for (var, (_, p)) in handles.into_iter().zip(params.iter_mut()) {
                if let Some(g) = grads.get(var) {
                    p.accumulate_grad(g)?;
                }
            }
            if let Some(opt) = opt.as_mut() {
                opt.as_dyn().step(&mut params)?;
            }
            for (_, p) in params.iter_mut() {
                p.zero_grad();
            }
            sum += value;
            batches += 1;
        }
        let feats = val_pairs
            .iter()
            .enumerate()
            .map(|(k, &(q, p, l))| Ok((val_cache.feature(model, k % n_sizes, q, p)?, l)))
            .collect::<Result<Vec<_>>>()?;
        let val_loss = if feats.is_empty() {
            0.0
        } else {
            let mut tape = Tape::new();
            let (loss, _) = mlp_loss(&mut tape, model, &feats)?;
            tape.value(loss).item()?
        };
        Ok((sum / batches.max(1) as f64, val_loss))
    });
    progress.adam = opt.as_ref().and_then(PhaseOptimizer::adam_state);
    model.set_trainable(&[]);
    result
}

fn check_phase2_data(train: &PairSet) -> Result<()> {
    if train.samples.len() < 2 || train.panoramas.len() < 2 {
        return Err(Error::invalid(
            "phase 2 needs at least two positives from two panoramas",
        ));
    }
    Ok(())
}

/// Mean verification loss over `pairs` as one tape; every image is embedded once.
fn phase2_batch(
    tape: &mut Tape,
    bound: &BoundModel,
    data: &PairSet,
    pairs: &[(usize, usize, bool)],
    size: usize,
    d: usize,
) -> Result<Var> {
    let mut panos: BTreeMap<usize, Var> = BTreeMap::new();
    let mut queries: BTreeMap<usize, Var> = BTreeMap::new();
    let mut losses = Vec::with_capacity(pairs.len());
    for &(q, p, label) in pairs {
        let fr = match panos.get(&p) {
            Some(&v) => v,
            None => {
                let x = tape.constant(data.panoramas[p].to_tensor());
                let v = bound.features(tape, x)?;
                panos.insert(p, v);
                v
            }
        };
        let fq = match queries.get(&q) {
            Some(&v) => v,
            None => {
                let x = tape.constant(resized(&data.samples[q].query, size, d)?.to_tensor());
                let v = bound.features(tape, x)?;
                queries.insert(q, v);
                v
            }
        };
        let out = bound.head(tape, fr, fq)?;
        losses.push(loss_verify(tape, out.score, label)?);
    }
    tape.mean_of(&losses)
}

fn phase2_val(
    model: &Model,
    val: &PairSet,
    pairs: &[(usize, usize, bool)],
    cfg: &TrainConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let d = model.downsample_factor();
    let mut total = 0.0;
    for (k, pair) in pairs.iter().enumerate() {
        let size = cfg.query_sizes[k % cfg.query_sizes.len()];
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let loss = phase2_batch(&mut tape, &bound, val, std::slice::from_ref(pair), size, d)?;
        total += tape.value(loss).item()?;
    }
    Ok(total / pairs.len() as f64)
}

/// Stage 2b: every weight trains end to end on balanced batches.
pub fn train_phase2b(
    model: &mut Model,
    train: &PairSet,
    val: &PairSet,
    cfg: &TrainConfig,
    progress: &mut PhaseProgress,
    sink: &mut dyn FnMut(&LogEntry) -> Result<()>,
) -> Result<()> {
    let d = model.downsample_factor();
    cfg.validate(d)?;
    train.validate(d)?;
    val.validate(d)?;
    check_phase2_data(train)?;
    model.set_trainable(&[Group::Backbone, Group::Mask, Group::Verifier]);
    let pc = cfg.phase2b.clone();
    let val_pairs = validation_pairs(val, cfg.seed);
    let mut opt = PhaseOptimizer::new(&pc, progress.adam.take())?;
    let result = run_phase(Phase::TwoB, &pc, cfg.seed, progress, sink, |epoch, rng| {
        let mut order: Vec<usize> = (0..train.samples.len()).collect();
        order.shuffle(rng);
        let (mut sum, mut batches) = (0.0, 0);
        for (step, chunk) in order.chunks(pc.batch_size / 2).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let size = *cfg.query_sizes.choose(rng).expect("validated non-empty");
            let pairs = balanced_pairs(train, chunk, rng);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let loss = phase2_batch(&mut tape, &bound, train, &pairs, size, d)?;
            let value = tape.value(loss).item()?;
            check_finite(value, Phase::TwoB, epoch, step)?;
            let grads = tape.backward(loss)?;
            model.accumulate(&bound, &grads)?;
            apply_update(model, opt.as_mut().map(PhaseOptimizer::as_dyn))?;
            sum += value;
            batches += 1;
        }
        Ok((
            sum / batches.max(1) as f64,
            phase2_val(model, val, &val_pairs, cfg)?,
        ))
    });
    progress.adam = opt.as_ref().and_then(PhaseOptimizer::adam_state);
    model.set_trainable(&[]);
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::ModelConfig;
    use crate::synth::{DatasetConfig, SynthConfig};

    fn tiny_data() -> (PairSet, PairSet) {
        let data = SynthDataset::generate(&DatasetConfig {
            panoramas: 3,
            samples: 12,
            pano_height: 64,
            pano_width: 128,
            synth: SynthConfig {
                query_size: 24,
                downsample_factor: 8,
                coverage: 0.5,
            },
            seed: 11,
        })
        .unwrap();
        (
            PairSet::from_synth(&data, 0..9).unwrap(),
            PairSet::from_synth(&data, 9..12).unwrap(),
        )
    }

    fn tiny_model() -> Model {
        Model::init(
            ModelConfig {
                backbone: BackboneConfig {
                    channels_per_stage: vec![4, 4, 6],
                    input_channels: 3,
                },
            },
            2,
        )
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.query_sizes = vec![16, 24];
        cfg.phase1.batch_size = 4;
        cfg.phase1.max_epochs = 2;
        cfg.phase2a.batch_size = 4;
        cfg.phase2a.max_epochs = 2;
        cfg.phase2b.batch_size = 4;
        cfg.phase2b.max_epochs = 1;
        cfg.seed = 3;
        cfg
    }

    fn snapshot(model: &Model, group: Group) -> Vec<Vec<u64>> {
        model
            .params()
            .into_iter()
            .filter(|(n, _)| Group::of(n) == group)
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    fn quiet() -> impl FnMut(&LogEntry) -> Result<()> {
        |_| Ok(())
    }

    #[test]
    fn half_mask_costs_ln2() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full(&[2, 3, 1], 0.5));
        let target = Grid::from_fn(2, 3, |r, c| (r + c) % 2 == 0);
        let l = loss_mask(&mut tape, p, &target).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn verification_loss_is_label_symmetric() {
        for p in [0.1, 0.37, 0.9] {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::scalar(p));
            let b = tape.constant(Tensor::scalar(1.0 - p));
            let la = loss_verify(&mut tape, a, true).unwrap();
            let lb = loss_verify(&mut tape, b, false).unwrap();
            let (va, vb) = (
                tape.value(la).item().unwrap(),
                tape.value(lb).item().unwrap(),
            );
            assert!((va - vb).abs() < 1e-12);
            assert!((va + p.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (train, val) = tiny_data();
        let mut model = tiny_model();
        let before = model.clone();
        let mut cfg = tiny_config();
        cfg.phase1.learning_rate = 0.0;
        cfg.phase2b.learning_rate = 0.0;
        train_phase1(
            &mut model,
            &train,
            &val,
            &cfg,
            &mut PhaseProgress::default(),
            &mut quiet(),
        )
        .unwrap();
        train_phase2b(
            &mut model,
            &train,
            &val,
            &cfg,
            &mut PhaseProgress::default(),
            &mut quiet(),
        )
        .unwrap();
        model.set_trainable(&[]);
        assert_eq!(model, before);
    }

    #[test]
    fn frozen_groups_stay_bit_identical() {
        let (train, val) = tiny_data();
        let mut model = tiny_model();
        let cfg = tiny_config();
        let verifier = snapshot(&model, Group::Verifier);
        train_phase1(
            &mut model,
            &train,
            &val,
            &cfg,
            &mut PhaseProgress::default(),
            &mut quiet(),
        )
        .unwrap();
        assert_eq!(snapshot(&model, Group::Verifier), verifier);
        let backbone = snapshot(&model, Group::Backbone);
        assert_ne!(backbone, snapshot(&tiny_model(), Group::Backbone));
        let mask = snapshot(&model, Group::Mask);
        let mut progress = PhaseProgress::default();
        train_phase2a(&mut model, &train, &val, &cfg, &mut progress, &mut quiet()).unwrap();
        assert_eq!(snapshot(&model, Group::Backbone), backbone);
        assert_eq!(snapshot(&model, Group::Mask), mask);
        assert_ne!(snapshot(&model, Group::Verifier), verifier);
        assert!(progress.adam.as_ref().is_some_and(|a| a.step > 0));
    }

    #[test]
    fn balanced_batches_pair_other_panoramas() {
        let (train, _) = tiny_data();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let picks = [0, 1, 2, 4];
        let pairs = balanced_pairs(&train, &picks, &mut rng);
        assert_eq!(pairs.len(), 8);
        assert_eq!(pairs.iter().filter(|p| p.2).count(), 4);
        for &(q, p, label) in &pairs {
            assert_eq!(label, p == train.samples[q].pano);
        }
        // One panorama only: negatives come from the rest of the set.
        let same = [0, 3, 6];
        let pairs = balanced_pairs(&train, &same, &mut rng);
        assert!(pairs
            .iter()
            .filter(|p| !p.2)
            .all(|&(q, p, _)| p != train.samples[q].pano));
    }

    #[test]
    fn training_is_deterministic() {
        let (train, val) = tiny_data();
        let cfg = tiny_config();
        let run = || {
            let mut model = tiny_model();
            let mut log = Vec::new();
            let mut sink = |e: &LogEntry| -> Result<()> {
                log.push(e.clone());
                Ok(())
            };
            train_phase1(
                &mut model,
                &train,
                &val,
                &cfg,
                &mut PhaseProgress::default(),
                &mut sink,
            )
            .unwrap();
            train_phase2b(
                &mut model,
                &train,
                &val,
                &cfg,
                &mut PhaseProgress::default(),
                &mut sink,
            )
            .unwrap();
            (model, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_eq!(la.len(), 3);
        assert_eq!(la[0].phase, Phase::One);
    }

    #[test]
    fn patience_stops_a_flat_phase() {
        let cfg = PhaseConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            batch_size: 1,
            max_epochs: 100,
            patience: 2,
            min_delta: 1e-3,
        };
        let mut p = PhaseProgress::default();
        for v in [1.0, 0.5, 0.4995, 0.4999] {
            assert!(!p.finished(&cfg));
            p.record(v, &cfg);
        }
        assert!(p.converged);
        assert_eq!(p.best_val, 0.5);
    }

    #[test]
    fn phase_names_round_trip() {
        for p in [Phase::One, Phase::TwoA, Phase::TwoB] {
            assert_eq!(Phase::parse(p.as_str()).unwrap(), p);
        }
        assert!(Phase::parse("3").is_err());
    }

    #[test]
    fn query_sizes_must_fit_the_backbone() {
        let mut cfg = TrainConfig::desk();
        assert!(cfg.validate(8).is_ok());
        cfg.query_sizes = vec![50];
        assert!(cfg.validate(8).is_err());
        let mut cfg = TrainConfig::desk();
        cfg.phase2a.batch_size = 3;
        assert!(cfg.validate(8).is_err());
    }
}
