//! Threshold-free verification metrics and report files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::{Manifest, ManifestRecord, Split};
use crate::model::Model;
use crate::verify::{verify, DEFAULT_THRESHOLD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    pub label: bool,
}

fn class_counts(samples: &[(f64, bool)]) -> (u64, u64) {
    let pos = samples.iter().filter(|s| s.1).count() as u64;
    (pos, samples.len() as u64 - pos)
}

fn check_scores(samples: &[(f64, bool)]) -> Result<()> {
    if samples.iter().any(|s| s.0.is_nan()) {
        return Err(Error::invalid("scores must not be NaN"));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties counting one
/// half. Counted exactly in half-units, so it agrees with explicit pair counting.
pub fn roc_auc(samples: &[(f64, bool)]) -> Result<f64> {
    check_scores(samples)?;
    let (pos, neg) = class_counts(samples);
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(
            "AUC needs at least one positive and one negative",
        ));
    }
    let mut sorted: Vec<(f64, bool)> = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut halves: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        halves += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(halves as f64 / (2 * pos * neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// `(threshold, true positives, false positives)` for every distinct score, descending;
/// a sample counts as predicted positive when its score is at least the threshold.
fn sweep(samples: &[(f64, bool)]) -> Vec<(f64, u64, u64)> {
    let mut sorted: Vec<(f64, bool)> = samples.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

/// Curve points at every distinct score and step-wise average precision
/// `sum_k (R_k - R_{k-1}) P_k`.
pub fn precision_recall(samples: &[(f64, bool)]) -> Result<(Vec<PrPoint>, f64)> {
    check_scores(samples)?;
    let (pos, _) = class_counts(samples);
    if pos == 0 {
        return Err(Error::invalid(
            "precision-recall needs at least one positive",
        ));
    }
    let mut points = Vec::new();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (threshold, tp, fp) in sweep(samples) {
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint {
            threshold,
            precision,
            recall,
        });
    }
    Ok((points, ap))
}

pub fn roc_curve(samples: &[(f64, bool)]) -> Result<Vec<RocPoint>> {
    check_scores(samples)?;
    let (pos, neg) = class_counts(samples);
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(
            "ROC needs at least one positive and one negative",
        ));
    }
    Ok(sweep(samples)
        .into_iter()
        .map(|(threshold, tp, fp)| RocPoint {
            threshold,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub auc: f64,
    pub average_precision: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub excluded: usize,
}

/// Metrics plus curves for a scored set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: Report,
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
    pub samples: Vec<ScoredSample>,
}

impl Evaluation {
    pub fn from_samples(samples: Vec<ScoredSample>, excluded: usize) -> Result<Evaluation> {
        if samples.is_empty() {
            return Err(Error::invalid("nothing to evaluate"));
        }
        let pairs: Vec<(f64, bool)> = samples.iter().map(|s| (s.score, s.label)).collect();
        let (pos, neg) = class_counts(&pairs);
        let auc = roc_auc(&pairs)?;
        let (pr, average_precision) = precision_recall(&pairs)?;
        let roc = roc_curve(&pairs)?;
        Ok(Evaluation {
            report: Report {
                auc,
                average_precision,
                n_pos: pos as usize,
                n_neg: neg as usize,
                excluded,
            },
            roc,
            pr,
            samples,
        })
    }

    /// Writes `report.json`, `roc.csv`, `pr.csv` and `scores.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        let json = serde_json::to_string_pretty(&self.report).expect("report serializes");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        write_csv(&dir.join("roc.csv"), &self.roc)?;
        write_csv(&dir.join("pr.csv"), &self.pr)?;
        write_csv(&dir.join("scores.csv"), &self.samples)
    }
}

/// Loads an image and brings it to backbone-divisible extents: `size x size` when
/// given, otherwise the nearest multiples of the downsampling factor.
pub fn prepare_image(path: &Path, d: usize, size: Option<usize>) -> Result<Image> {
    let img = Image::load(path)?;
    match size {
        Some(s) => img.resize_for_backbone(s, s, d),
        None => Ok(match img.fit_to_multiple(d)? {
            Some(fitted) => {
                log::info!(
                    "resized {} from {}x{} to {}x{}",
                    path.display(),
                    img.height(),
                    img.width(),
                    fitted.height(),
                    fitted.width()
                );
                fitted
            }
            None => img,
        }),
    }
}

/// Scores every record of `manifest` (optionally one split). Records whose images
/// cannot be read are logged and counted as excluded.
pub fn evaluate_manifest(
    model: &Model,
    manifest: &Manifest,
    split: Option<Split>,
    query_size: Option<usize>,
) -> Result<Evaluation> {
    let d = model.downsample_factor();
    let mut samples = Vec::new();
    let mut excluded = 0;
    let records: Vec<&ManifestRecord> = manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .collect();
    for (i, rec) in records.iter().enumerate() {
        let loaded =
            prepare_image(&manifest.resolve(&rec.query_path), d, query_size).and_then(|q| {
                let r = prepare_image(&manifest.resolve(&rec.ref_path), d, None)?;
                Ok((q, r))
            });
        let (query, reference) = match loaded {
            Ok(pair) => pair,
            Err(e) => {
                log::warn!("excluding record {}: {e}", i + 1);
                excluded += 1;
                continue;
            }
        };
        let v = verify(&query, &reference, model, DEFAULT_THRESHOLD)?;
        samples.push(ScoredSample {
            id: format!("{}|{}", rec.query_path, rec.ref_path),
            score: v.score,
            label: rec.label == 1,
        });
    }
    Evaluation::from_samples(samples, excluded)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format {
        what: "csv output",
        message: format!("{}: {e}", path.display()),
    };
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    for r in rows {
        w.serialize(r).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
