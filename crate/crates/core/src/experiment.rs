//! The desk-scale synthetic experiment: procedural panoramas, two-phase training,
//! then verification and localization on held-out positives and derangement negatives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{Evaluation, ScoredSample};
use crate::localize::{localize, DEFAULT_MASK_THRESHOLD};
use crate::model::{Model, ModelConfig};
use crate::synth::{make_negatives, DatasetConfig, SynthConfig, SynthDataset};
use crate::train::{
    train_phase1, train_phase2a, train_phase2b, LogEntry, PairSet, PhaseProgress, TrainConfig,
};
use crate::verify::{verify, DEFAULT_THRESHOLD};

#[derive(Clone, Debug, PartialEq)]
pub struct DeskConfig {
    pub panoramas: usize,
    pub train_positives: usize,
    pub val_positives: usize,
    pub test_positives: usize,
    pub pano_height: usize,
    pub pano_width: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            panoramas: 50,
            train_positives: 400,
            val_positives: 40,
            test_positives: 100,
            pano_height: 64,
            pano_width: 256,
            model: ModelConfig::default(),
            train: TrainConfig::desk(),
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeskOutcome {
    pub model: Model,
    pub log: Vec<LogEntry>,
    pub evaluation: Evaluation,
    /// IoU of the localized box against the source box per held-out positive; `None`
    /// when the mask had no cell above threshold.
    pub ious: Vec<Option<f64>>,
}

impl DeskOutcome {
    pub fn fraction_localized(&self, min_iou: f64) -> f64 {
        let hits = self
            .ious
            .iter()
            .filter(|v| v.is_some_and(|x| x >= min_iou))
            .count();
        hits as f64 / self.ious.len().max(1) as f64
    }
}

pub fn run_desk(cfg: &DeskConfig) -> Result<DeskOutcome> {
    let d = cfg.model.backbone.downsample_factor();
    let total = cfg.train_positives + cfg.val_positives + cfg.test_positives;
    let data = SynthDataset::generate(&DatasetConfig {
        panoramas: cfg.panoramas,
        samples: total,
        pano_height: cfg.pano_height,
        pano_width: cfg.pano_width,
        synth: SynthConfig {
            query_size: *cfg.train.query_sizes.iter().max().unwrap_or(&64),
            downsample_factor: d,
            coverage: cfg.train.mask_coverage,
        },
        seed: cfg.seed,
    })?;
    let train_end = cfg.train_positives;
    let val_end = train_end + cfg.val_positives;
    let train = PairSet::from_synth(&data, 0..train_end)?;
    let val = PairSet::from_synth(&data, train_end..val_end)?;

    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let mut log = Vec::new();
    let mut sink = |e: &LogEntry| -> Result<()> {
        log.push(e.clone());
        Ok(())
    };
    train_phase1(
        &mut model,
        &train,
        &val,
        &train_cfg,
        &mut PhaseProgress::default(),
        &mut sink,
    )?;
    train_phase2a(
        &mut model,
        &train,
        &val,
        &train_cfg,
        &mut PhaseProgress::default(),
        &mut sink,
    )?;
    train_phase2b(
        &mut model,
        &train,
        &val,
        &train_cfg,
        &mut PhaseProgress::default(),
        &mut sink,
    )?;

    let test: Vec<usize> = (val_end..total).collect();
    let keys: Vec<usize> = test.iter().map(|&i| data.records[i].pano_id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e57);
    let negatives = make_negatives(&keys, &mut rng)?;
    let query_size = train_cfg.query_sizes[train_cfg.query_sizes.len() / 2];
    let mut samples = Vec::with_capacity(2 * test.len());
    let mut ious = Vec::with_capacity(test.len());
    for (k, &i) in test.iter().enumerate() {
        let rec = &data.records[i];
        let query = rec
            .query
            .as_ref()
            .expect("generated records carry their query")
            .resize_for_backbone(query_size, query_size, d)?;
        let pano = &data.panoramas[rec.pano_id];
        let pos = verify(&query, pano, &model, DEFAULT_THRESHOLD)?;
        samples.push(ScoredSample {
            id: format!("pos{k}"),
            score: pos.score,
            label: true,
        });
        let bbox = localize(
            &pos.mask_reference,
            pano.height(),
            pano.width(),
            DEFAULT_MASK_THRESHOLD,
            true,
        )?;
        ious.push(bbox.map(|b| b.iou(&rec.source_box, pano.width())));
        let other = &data.panoramas[keys[negatives[k]]];
        let neg = verify(&query, other, &model, DEFAULT_THRESHOLD)?;
        samples.push(ScoredSample {
            id: format!("neg{k}"),
            score: neg.score,
            label: false,
        });
    }
    model.zero_grad();
    Ok(DeskOutcome {
        model,
        log,
        evaluation: Evaluation::from_samples(samples, 0)?,
        ious,
    })
}
