//! On-disk synthetic datasets and loading manifests into training pairs.
//!
//! A dataset directory holds `panoramas/`, `queries/`, `manifest.csv` (positives and
//! distance-checked negatives) and `synth_records.jsonl`, which keeps each positive's
//! source box and augmentation parameters keyed by query path.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gps::DEFAULT_MIN_KM;
use crate::image::Image;
use crate::manifest::{build_negative_manifest, Manifest, ManifestRecord, Split};
use crate::synth::{synthetic_location, SynthDataset, SynthRecord};
use crate::train::{PairSet, TrainSample};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const RECORDS_FILE: &str = "synth_records.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub query_path: String,
    pub ref_path: String,
    #[serde(flatten)]
    pub record: SynthRecord,
}

/// Every tenth sample from the ninth on is validation, from the tenth on test.
pub fn split_of(index: usize) -> Split {
    match index % 10 {
        8 => Split::Val,
        9 => Split::Test,
        _ => Split::Train,
    }
}

pub fn panorama_path(id: usize) -> String {
    format!("panoramas/pano_{id:04}.ppm")
}

pub fn query_path(index: usize) -> String {
    format!("queries/query_{index:05}.ppm")
}

/// Writes `data` under `dir`. `seed` places the panoramas on the globe; negatives
/// pair each split's queries with references at least [`DEFAULT_MIN_KM`] away.
pub fn write_dataset(data: &SynthDataset, dir: &Path, seed: u64) -> Result<Manifest> {
    for sub in ["panoramas", "queries"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (id, pano) in data.panoramas.iter().enumerate() {
        pano.save(dir.join(panorama_path(id)))?;
    }
    let mut positives = Vec::with_capacity(data.records.len());
    let mut stored = Vec::with_capacity(data.records.len());
    for (i, rec) in data.records.iter().enumerate() {
        let query = rec
            .query
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("record {i} has no query image")))?;
        let qp = query_path(i);
        query.save(dir.join(&qp))?;
        let loc = synthetic_location(seed, rec.pano_id);
        positives.push(ManifestRecord {
            query_path: qp.clone(),
            ref_path: panorama_path(rec.pano_id),
            lat: loc.lat,
            lon: loc.lon,
            label: 1,
            split: split_of(i),
        });
        stored.push(StoredRecord {
            query_path: qp,
            ref_path: panorama_path(rec.pano_id),
            record: rec.clone(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_6761);
    let mut records = positives.clone();
    for split in [Split::Train, Split::Val, Split::Test] {
        let group: Vec<ManifestRecord> = positives
            .iter()
            .filter(|r| r.split == split)
            .cloned()
            .collect();
        if group.len() >= 2 {
            records.extend(build_negative_manifest(&group, DEFAULT_MIN_KM, &mut rng)?);
        }
    }
    let manifest = Manifest::new(dir, records);
    manifest.save(dir.join(MANIFEST_FILE))?;
    write_records(&dir.join(RECORDS_FILE), &stored)?;
    Ok(manifest)
}

pub fn write_records(path: &Path, records: &[StoredRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<StoredRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "synthetic record file",
            message: format!("{} line {}: {e}", path.display(), i + 1),
        })?);
    }
    Ok(out)
}

/// Positives of `split` as training pairs. Panoramas are loaded once each. Source
/// boxes come from the record file beside the manifest when it exists; without it the
/// pairs can still train phase 2 but not phase 1.
pub fn load_pairs(manifest: &Manifest, split: Split) -> Result<PairSet> {
    let records_path = manifest.base_dir.join(RECORDS_FILE);
    let boxes: BTreeMap<String, _> = if records_path.exists() {
        read_records(&records_path)?
            .into_iter()
            .map(|r| (r.query_path, r.record.source_box))
            .collect()
    } else {
        BTreeMap::new()
    };
    let mut pano_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut panoramas = Vec::new();
    let mut samples = Vec::new();
    for rec in manifest.split(split).filter(|r| r.label == 1) {
        let pano = match pano_index.get(&rec.ref_path) {
            Some(&i) => i,
            None => {
                panoramas.push(Image::load(manifest.resolve(&rec.ref_path))?);
                pano_index.insert(rec.ref_path.clone(), panoramas.len() - 1);
                panoramas.len() - 1
            }
        };
        samples.push(TrainSample {
            query: Image::load(manifest.resolve(&rec.query_path))?,
            pano,
            source_box: boxes.get(&rec.query_path).copied(),
        });
    }
    Ok(PairSet { panoramas, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{DatasetConfig, SynthConfig};

    fn tiny() -> SynthDataset {
        SynthDataset::generate(&DatasetConfig {
            panoramas: 3,
            samples: 20,
            pano_height: 64,
            pano_width: 128,
            synth: SynthConfig {
                query_size: 32,
                downsample_factor: 8,
                coverage: 0.5,
            },
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn splits_follow_index() {
        assert_eq!(split_of(0), Split::Train);
        assert_eq!(split_of(8), Split::Val);
        assert_eq!(split_of(19), Split::Test);
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny();
        let written = write_dataset(&data, dir.path(), 5).unwrap();
        let manifest = Manifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.records, written.records);
        let pos = manifest.records.iter().filter(|r| r.label == 1).count();
        assert_eq!(pos, 20);
        assert!(manifest.records.iter().any(|r| r.label == 0));

        let records = read_records(&dir.path().join(RECORDS_FILE)).unwrap();
        assert_eq!(records.len(), 20);
        assert_eq!(records[3].record.source_box, data.records[3].source_box);
        assert_eq!(records[3].record.params, data.records[3].params);

        let train = load_pairs(&manifest, Split::Train).unwrap();
        assert_eq!(train.samples.len(), 16);
        assert_eq!(train.panoramas.len(), 3);
        assert!(train.samples.iter().all(|s| s.source_box.is_some()));
        // PPM stores 8-bit values, so reloaded images match to quantisation.
        let q = &train.samples[0].query;
        assert!(
            q.mean_abs_diff(data.records[0].query.as_ref().unwrap())
                .unwrap()
                < 0.5 / 255.0 + 1e-12
        );
    }
}
